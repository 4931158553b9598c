"""Sliding-window perplexity and the ablation harnesses built on it."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .attention import AttentionPattern, GlobalPattern, ShiftShortPattern
from .errors import ConfigError, LengthError
from .model import Model, fresh_adapters, token_nll
from .trainer import TrainConfig, train_loop


def window_spans(total: int, ctx_len: int) -> list[tuple[int, int]]:
    """Non-overlapping windows with stride ``ctx_len``; a tail of >= 2 tokens is kept."""
    spans = []
    for start in range(0, total, ctx_len):
        end = min(start + ctx_len, total)
        if end - start >= 2:
            spans.append((start, end))
    return spans


@dataclass
class PerplexityEntry:
    ctx_len: int
    windows: int
    tokens: int
    nll: float
    ppl: float
    quantized: bool


@dataclass
class PerplexityReport:
    model: str
    pattern: str
    entries: list[PerplexityEntry] = field(default_factory=list)
    config: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "model": self.model,
            "pattern": self.pattern,
            "entries": [asdict(e) for e in self.entries],
            "config": self.config,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PerplexityReport":
        obj = json.loads(text)
        return cls(obj["model"], obj["pattern"], [PerplexityEntry(**e) for e in obj["entries"]], obj.get("config", {}))

    def to_tsv(self) -> str:
        rows = ["ctx_len\twindows\ttokens\tnll\tppl\tquantized"]
        rows += [f"{e.ctx_len}\t{e.windows}\t{e.tokens}\t{e.nll!r}\t{e.ppl!r}\t{int(e.quantized)}" for e in self.entries]
        return "\n".join(rows) + "\n"


def sliding_window_perplexity(model: Model, tokens, ctx_len: int, pattern: AttentionPattern | None = None,
                              quantize_threshold: int | None = None) -> PerplexityEntry:
    """Pooled-token perplexity over consecutive windows of ``ctx_len`` tokens.

    Weights are used in 4-bit form iff ``ctx_len >= quantize_threshold``
    (default: the model's pretrained context length).
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if ctx_len < 2:
        raise ConfigError("ctx_len must be at least 2")
    if tokens.size < 2:
        raise LengthError("need at least two tokens")
    if ctx_len > model.config.target_ctx:
        raise ConfigError(f"ctx_len {ctx_len} exceeds the model's target_ctx {model.config.target_ctx}")
    threshold = model.config.pretrained_ctx if quantize_threshold is None else quantize_threshold
    quantized = ctx_len >= threshold
    pattern = pattern or GlobalPattern()
    total = 0.0
    count = 0
    spans = window_spans(tokens.size, ctx_len)
    for start, end in spans:
        window = tokens[start:end]
        logits = model.forward(window[:-1], pattern, quantized=quantized)
        nll = token_nll(logits, window[1:])
        total += float(nll.sum())
        count += nll.size
    return PerplexityEntry(ctx_len, len(spans), count, total, math.exp(total / count), quantized)


def context_length_sweep(model: Model, tokens, lengths: Sequence[int], pattern: AttentionPattern | None = None,
                         quantize_threshold: int | None = None, name: str = "model",
                         config: dict[str, str] | None = None) -> PerplexityReport:
    lengths = list(lengths)
    if not lengths:
        raise ConfigError("no evaluation lengths given")
    if lengths != sorted(lengths):
        raise ConfigError("evaluation lengths must be ascending")
    pattern = pattern or GlobalPattern()
    entries = [sliding_window_perplexity(model, tokens, n, pattern, quantize_threshold) for n in lengths]
    return PerplexityReport(name, pattern.describe(), entries, dict(config or {}))


# -- ablations --------------------------------------------------------------------


@dataclass
class AblationTable:
    kind: str
    columns: list[str]
    rows: list[list]
    config: dict[str, str] = field(default_factory=dict)
    notes: dict[str, float | str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "columns": self.columns, "rows": self.rows,
                "notes": self.notes, "config": self.config}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_tsv(self) -> str:
        lines = ["\t".join(self.columns)]
        lines += ["\t".join(repr(v) if isinstance(v, float) else str(v) for v in row) for row in self.rows]
        lines += [f"# {k}\t{v!r}" for k, v in self.notes.items()]
        return "\n".join(lines) + "\n"


def with_fresh_adapters(model: Model, rank: int | None = None) -> Model:
    """Same frozen base, new zero-initialised adapters (seeded from the config)."""
    cfg = model.config if rank is None else model.config.replace(lora_rank=rank)
    return model.fork(cfg, fresh_adapters(cfg))


def ablate_lora_rank(model: Model, ranks: Sequence[int], dataset, train_config: TrainConfig, eval_tokens,
                     ctx_len: int | None = None, pattern: AttentionPattern | None = None,
                     config: dict[str, str] | None = None) -> AblationTable:
    """Train one fresh adapter set per rank from the same seed; evaluate each at ``ctx_len``."""
    if len(set(ranks)) != len(ranks):
        raise ConfigError("ranks must be distinct")
    ctx_len = ctx_len or model.config.target_ctx
    rows = []
    for rank in ranks:
        candidate = with_fresh_adapters(model, rank)
        train_loop(candidate, dataset, train_config, pattern)
        entry = sliding_window_perplexity(candidate, eval_tokens, ctx_len)
        rows.append([rank, candidate.trainable_count(), entry.ppl])
    return AblationTable("rank", ["rank", "trainable_params", "ppl"], rows, dict(config or {}))


def ablate_steps(model: Model, dataset, train_config: TrainConfig, eval_tokens, eval_every: int,
                 max_steps: int | None = None, ctx_len: int | None = None, pattern: AttentionPattern | None = None,
                 config: dict[str, str] | None = None) -> AblationTable:
    """Perplexity at step 0 (interpolation only) and after every ``eval_every`` updates."""
    if eval_every < 1:
        raise ConfigError("eval_every must be >= 1")
    max_steps = train_config.max_steps if max_steps is None else max_steps
    ctx_len = ctx_len or model.config.target_ctx
    rows: list[list] = []

    def probe(step: int, current: Model) -> None:
        if step % eval_every == 0:
            rows.append([step, sliding_window_perplexity(current, eval_tokens, ctx_len).ppl])

    candidate = with_fresh_adapters(model)
    run = TrainConfig(**{**train_config.__dict__, "max_steps": max_steps})
    log = train_loop(candidate, dataset, run, pattern, on_step=probe)
    table = AblationTable("steps", ["step", "ppl"], rows, dict(config or {}))
    table.notes["final_train_loss"] = log.losses[-1] if log.records else float("nan")
    return table


def ablate_attention_pattern(model: Model, tokens, ctx_len: int | None = None, group_size: int | None = None,
                             quantize_threshold: int | None = None,
                             config: dict[str, str] | None = None) -> AblationTable:
    """Shift short versus global attention at inference on identical windows."""
    ctx_len = ctx_len or model.config.target_ctx
    group_size = group_size or model.config.group_size or ctx_len // 4
    shift = sliding_window_perplexity(model, tokens, ctx_len, ShiftShortPattern(group_size), quantize_threshold)
    glob = sliding_window_perplexity(model, tokens, ctx_len, GlobalPattern(), quantize_threshold)
    rows = [["global", 0, glob.ppl], ["shift_short", group_size, shift.ppl]]
    table = AblationTable("attention", ["pattern", "group_size", "ppl"], rows, dict(config or {}))
    table.notes["ppl_difference_shift_minus_global"] = shift.ppl - glob.ppl
    return table


def trailing_medians(steps: Sequence[int], values: Sequence[float], span: int = 50) -> list[float]:
    """Median of the values at grid steps within ``(t - span, t]`` for each grid step ``t``."""
    steps = np.asarray(steps)
    values = np.asarray(values, dtype=np.float64)
    return [float(np.median(values[(steps > t - span) & (steps <= t)])) for t in steps]
