"""Global causal attention and shift short attention.

Shift short attention splits heads in two.  The first half (plus the extra
head when the count is odd) attends causally inside contiguous groups of
``G`` tokens.  The second half does the same on a token stream rotated left
by ``G/2``, so its groups straddle the boundaries of the first half's groups.
Rotation wraps the sequence tail onto its head in the last group; pairs
joined only by that wrap-around (original distance >= G) are masked.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import Tensor, astype, concat, matmul, pad_axis, roll, softmax_rows

# scores, softmax and the weighted sum run in float64 whatever the storage dtype
ACCUMULATE = np.float64


@dataclass(frozen=True)
class GlobalPattern:
    name: str = field(default="global", init=False)

    def describe(self) -> str:
        return "global"


@dataclass(frozen=True)
class ShiftShortPattern:
    group_size: int
    name: str = field(default="shift_short", init=False)

    def __post_init__(self):
        if self.group_size < 2 or self.group_size % 2:
            raise ConfigError(f"group size must be an even number >= 2, got {self.group_size}")

    def describe(self) -> str:
        return f"shift_short(G={self.group_size})"


AttentionPattern = GlobalPattern | ShiftShortPattern


def make_pattern(name: str, group_size: int | None = None) -> AttentionPattern:
    if name == "global":
        return GlobalPattern()
    if name == "shift_short":
        if group_size is None:
            raise ConfigError("shift_short needs a group size")
        return ShiftShortPattern(group_size)
    raise ConfigError(f"unknown attention pattern {name!r}")


@dataclass
class AttentionStats:
    """Score-matrix sizes; counts are summed over heads."""

    score_elements: int = 0
    peak_score_buffer: int = 0
    heads: int = 0

    @property
    def score_elements_per_head(self) -> int:
        return self.score_elements // self.heads if self.heads else 0

    def record(self, buffer_shape: tuple[int, ...], heads: int) -> None:
        size = int(np.prod(buffer_shape))
        self.score_elements += size
        self.peak_score_buffer = max(self.peak_score_buffer, size)
        self.heads += heads


def attention_stats(n: int, group_size: int | None, heads: int) -> AttentionStats:
    """Predicted score-buffer sizes; ``group_size=None`` means global attention."""
    if group_size is None:
        return AttentionStats(heads * n * n, heads * n * n, heads)
    if n % group_size:
        raise ConfigError(f"group size {group_size} does not divide {n}")
    unshifted = heads - heads // 2
    per_head = n * group_size
    return AttentionStats(heads * per_head, unshifted * per_head, heads)


# -- masks ------------------------------------------------------------------------


@lru_cache(maxsize=64)
def causal_mask(n: int) -> np.ndarray:
    mask = np.where(np.tri(n, dtype=bool), 0.0, -np.inf).astype(np.float32)
    mask.flags.writeable = False
    return mask


@lru_cache(maxsize=256)
def group_mask(length: int, group_size: int, shift: int, valid: int) -> np.ndarray:
    """Additive mask of shape (length/G, G, G) for groups of a stream rotated left by ``shift``."""
    pos = np.arange(length).reshape(length // group_size, group_size)
    orig = (pos + shift) % length
    qi = orig[:, :, None]
    kj = orig[:, None, :]
    allowed = (kj <= qi) & (qi - kj < group_size)
    # padding keys are never attended; a padding query keeps itself so no row is empty
    allowed &= (kj < valid) | (kj == qi)
    mask = np.where(allowed, 0.0, -np.inf).astype(np.float32)
    mask.flags.writeable = False
    return mask


# -- kernels ------------------------------------------------------------------------


def _check_qkv(q: Tensor, k: Tensor, v: Tensor) -> None:
    if q.ndim != 3 or q.shape != k.shape or q.shape != v.shape:
        raise DimensionError(f"q, k, v must share a (seq, heads, head_dim) shape: {q.shape}, {k.shape}, {v.shape}")


def global_causal_attention(q: Tensor, k: Tensor, v: Tensor, stats: AttentionStats | None = None) -> Tensor:
    """Per-head ``softmax(q k^T / sqrt(d) + causal) v`` for (seq, heads, head_dim) inputs."""
    _check_qkv(q, k, v)
    n, heads, d = q.shape
    dtype = q.dtype
    q, k, v = (astype(t, ACCUMULATE) for t in (q, k, v))
    qh = q.transpose(1, 0, 2)
    kh = k.transpose(1, 2, 0)
    vh = v.transpose(1, 0, 2)
    scores = matmul(qh, kh) * (1.0 / math.sqrt(d))
    if stats is not None:
        stats.record(scores.shape, heads)
    probs = softmax_rows(scores, causal_mask(n))
    return astype(matmul(probs, vh).transpose(1, 0, 2), dtype)


def _grouped(q: Tensor, k: Tensor, v: Tensor, group_size: int, shift: int, valid: int,
             stats: AttentionStats | None) -> Tensor:
    length, heads, d = q.shape
    n_groups = length // group_size
    if shift:
        q, k, v = (roll(t, -shift, axis=0) for t in (q, k, v))

    def split(t: Tensor) -> Tensor:
        return t.reshape(n_groups, group_size, heads, d).transpose(2, 0, 1, 3)

    qg, kg, vg = split(q), split(k), split(v)
    scores = matmul(qg, kg.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(d))
    if stats is not None:
        stats.record(scores.shape, heads)
    probs = softmax_rows(scores, group_mask(length, group_size, shift, valid))
    out = matmul(probs, vg).transpose(1, 2, 0, 3).reshape(length, heads, d)
    if shift:
        out = roll(out, shift, axis=0)
    return out


def shift_short_attention(q: Tensor, k: Tensor, v: Tensor, group_size: int,
                          stats: AttentionStats | None = None) -> Tensor:
    _check_qkv(q, k, v)
    n, heads, _ = q.shape
    ShiftShortPattern(group_size)
    dtype = q.dtype
    q, k, v = (astype(t, ACCUMULATE) for t in (q, k, v))
    if group_size > n:
        raise ConfigError(f"group size {group_size} exceeds sequence length {n}")
    pad = (-n) % group_size
    if pad:
        q, k, v = (pad_axis(t, 0, pad, axis=0) for t in (q, k, v))
    length = n + pad
    split = heads - heads // 2
    parts = [_grouped(q[:, :split], k[:, :split], v[:, :split], group_size, 0, n, stats)]
    if heads // 2:
        half = group_size // 2
        parts.append(_grouped(q[:, split:], k[:, split:], v[:, split:], group_size, half, n, stats))
    out = concat(parts, axis=1) if len(parts) > 1 else parts[0]
    if pad:
        out = out[:n]
    return astype(out, dtype)


def attend(q: Tensor, k: Tensor, v: Tensor, pattern: AttentionPattern,
           stats: AttentionStats | None = None) -> Tensor:
    """Dispatch on ``pattern``.

    A sequence shorter than one group would be a single padded group, where
    shift short attention reduces to global causal attention; it is computed
    as such.
    """
    if isinstance(pattern, ShiftShortPattern) and q.shape[0] >= pattern.group_size:
        return shift_short_attention(q, k, v, pattern.group_size, stats)
    if isinstance(pattern, (GlobalPattern, ShiftShortPattern)):
        return global_causal_attention(q, k, v, stats)
    raise ConfigError(f"unknown attention pattern {pattern!r}")
