"""Byte-level tokenization, corpus ingestion, length filtering and sample building."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import DataError, FormatError, RejectedSampleError

BYTE_VOCAB = 256
END_ID = 256  # the single reserved id: end-of-target marker, also usable as padding
VOCAB_SIZE = 257
TOKEN_MAGIC = b"LQTK"
TOKEN_HEADER = struct.Struct("<4sQ")

DEFAULT_MIN_TOKENS = 4096
DEFAULT_MAX_TOKENS = 32768


def tokenize(text: bytes | str) -> np.ndarray:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return np.frombuffer(bytes(text), dtype=np.uint8).astype(np.int64)


def detokenize(ids) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= VOCAB_SIZE):
        raise DataError("token id outside the byte vocabulary")
    return ids[ids < BYTE_VOCAB].astype(np.uint8).tobytes()


# -- token files ---------------------------------------------------------------


def write_token_file(path, ids) -> None:
    ids = np.asarray(ids, dtype="<u4")
    Path(path).write_bytes(TOKEN_HEADER.pack(TOKEN_MAGIC, ids.size) + ids.tobytes())


def read_token_file(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if len(buf) < TOKEN_HEADER.size:
        raise FormatError(f"{path}: truncated token file")
    magic, count = TOKEN_HEADER.unpack_from(buf)
    if magic != TOKEN_MAGIC:
        raise FormatError(f"{path}: bad token-file magic")
    if len(buf) != TOKEN_HEADER.size + 4 * count:
        raise FormatError(f"{path}: expected {count} tokens")
    return np.frombuffer(buf, dtype="<u4", offset=TOKEN_HEADER.size).astype(np.int64)


def is_token_file(path) -> bool:
    with open(path, "rb") as fh:
        return fh.read(4) == TOKEN_MAGIC


# -- corpora ------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    byte_offset: int
    byte_length: int
    token_start: int
    token_count: int
    kind: str = "text"


@dataclass
class TokenizedCorpus:
    ids: np.ndarray
    vocab_size: int = VOCAB_SIZE
    manifest: list[ManifestEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return int(self.ids.size)

    def documents(self) -> list[np.ndarray]:
        return [self.ids[e.token_start:e.token_start + e.token_count] for e in self.manifest]

    def reconstruct(self) -> np.ndarray:
        """Re-read every manifest entry from disk and concatenate."""
        parts = []
        for e in self.manifest:
            if e.kind == "tokens":
                parts.append(read_token_file(e.path))
            else:
                with open(e.path, "rb") as fh:
                    fh.seek(e.byte_offset)
                    parts.append(tokenize(fh.read(e.byte_length)))
        return np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)

    def manifest_json(self) -> str:
        return json.dumps([e.__dict__ for e in self.manifest], indent=1)


def load_corpus(paths: Sequence[str | Path]) -> TokenizedCorpus:
    """Tokenize text files (or read token files) in the given order."""
    ids: list[np.ndarray] = []
    manifest: list[ManifestEntry] = []
    start = 0
    for path in paths:
        path = Path(path)
        if not path.is_file():
            raise DataError(f"corpus file not found: {path}")
        if is_token_file(path):
            chunk = read_token_file(path)
            entry = ManifestEntry(str(path), 0, path.stat().st_size, start, chunk.size, "tokens")
        else:
            raw = path.read_bytes()
            chunk = tokenize(raw)
            entry = ManifestEntry(str(path), 0, len(raw), start, chunk.size)
        if chunk.size and chunk.max() >= VOCAB_SIZE:
            raise DataError(f"{path}: token id outside vocabulary")
        ids.append(chunk)
        manifest.append(entry)
        start += chunk.size
    joined = np.concatenate(ids) if ids else np.zeros(0, dtype=np.int64)
    return TokenizedCorpus(joined, VOCAB_SIZE, manifest)


@dataclass
class FilterResult:
    kept: list
    kept_count: int
    dropped_count: int


def filter_by_length(documents: Sequence, min_tokens: int = DEFAULT_MIN_TOKENS,
                     max_tokens: float = DEFAULT_MAX_TOKENS) -> FilterResult:
    """Keep documents whose token count lies in ``[min_tokens, max_tokens]``."""
    if min_tokens > max_tokens:
        raise DataError("min_tokens exceeds max_tokens")
    kept = [d for d in documents if min_tokens <= len(d) <= max_tokens]
    return FilterResult(kept, len(kept), len(documents) - len(kept))


# -- training samples --------------------------------------------------------------


@dataclass(frozen=True)
class TrainingSample:
    tokens: np.ndarray
    mask: np.ndarray


@dataclass(frozen=True)
class InstructionSample:
    prompt: np.ndarray
    target: np.ndarray
    tokens: np.ndarray
    mask: np.ndarray

    def as_training(self) -> TrainingSample:
        return TrainingSample(self.tokens, self.mask)


def build_instruction_sample(prompt, target, target_ctx: int, append_end: bool = True) -> InstructionSample:
    """Concatenate prompt and target; the loss mask covers the target (and end marker).

    Over-long samples lose prompt tokens from the left; the target is never cut.
    """
    prompt = np.asarray(prompt, dtype=np.int64)
    target = np.asarray(target, dtype=np.int64)
    if target.size == 0:
        raise DataError("target must not be empty")
    if append_end:
        target = np.concatenate([target, [END_ID]])
    if target.size > target_ctx:
        raise RejectedSampleError(f"target of {target.size} tokens exceeds context {target_ctx}")
    room = target_ctx - target.size
    if prompt.size > room:
        prompt = prompt[prompt.size - room:]
    tokens = np.concatenate([prompt, target])
    mask = np.concatenate([np.zeros(prompt.size, dtype=bool), np.ones(target.size, dtype=bool)])
    return InstructionSample(prompt, target, tokens, mask)


def load_instructions(path, target_ctx: int, append_end: bool = True) -> tuple[list[InstructionSample], int]:
    """Read JSON lines with ``prompt``/``target`` strings; returns samples and the rejected count."""
    samples, rejected = [], 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                prompt, target = obj["prompt"], obj["target"]
            except (json.JSONDecodeError, KeyError, TypeError):
                raise FormatError(f"{path}:{lineno}: expected an object with prompt and target") from None
            if not isinstance(prompt, str) or not isinstance(target, str):
                raise FormatError(f"{path}:{lineno}: prompt and target must be strings")
            try:
                samples.append(build_instruction_sample(tokenize(prompt), tokenize(target), target_ctx, append_end))
            except RejectedSampleError:
                rejected += 1
    return samples, rejected


def pack_pretraining_batches(corpus, seq_len: int, seed: int = 0) -> list[TrainingSample]:
    """Cut the corpus into consecutive ``seq_len`` spans and shuffle them."""
    ids = np.asarray(corpus.ids if isinstance(corpus, TokenizedCorpus) else corpus, dtype=np.int64)
    if seq_len < 2:
        raise DataError("seq_len must be at least 2")
    if ids.size < seq_len + 1:
        raise DataError(f"corpus of {ids.size} tokens is shorter than seq_len + 1 = {seq_len + 1}")
    count = ids.size // seq_len
    spans = ids[: count * seq_len].reshape(count, seq_len)
    order = np.random.default_rng(seed).permutation(count)
    full = np.ones(seq_len, dtype=bool)
    full.flags.writeable = False
    return [TrainingSample(spans[i].copy(), full) for i in order]


def cycle_samples(samples: Sequence[TrainingSample], seed: int = 0) -> Iterator[TrainingSample]:
    """Endless stream; after the first pass each epoch is reshuffled from ``seed``."""
    if not samples:
        raise DataError("dataset is empty")
    rng = np.random.default_rng(seed)
    order = np.arange(len(samples))
    while True:
        for i in order:
            yield samples[i]
        order = rng.permutation(len(samples))


def split_holdout(ids: np.ndarray, fraction: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Train / held-out split taking the tail of the corpus as held-out text."""
    cut = int(math.floor(ids.size * (1.0 - fraction)))
    return ids[:cut], ids[cut:]
