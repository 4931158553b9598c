"""Rotary position embeddings with position interpolation.

With interpolation, position ``m`` is rotated as if it were at ``m * scale``
where ``scale = pretrained_ctx / target_ctx``.  Effective positions stay
fractional; nothing is rounded.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, PositionError
from .tensor import Tensor

DEFAULT_BASE = 10000.0


def inverse_frequencies(head_dim: int, base: float = DEFAULT_BASE) -> np.ndarray:
    pair = np.arange(head_dim // 2, dtype=np.float64)
    return base ** (-2.0 * pair / head_dim)


def rope_angles(positions, scale: float, head_dim: int, base: float = DEFAULT_BASE) -> np.ndarray:
    """Angles ``(m * scale) * base**(-2i/head_dim)`` in float64, shape (len, head_dim/2)."""
    effective = np.asarray(positions, dtype=np.float64).reshape(-1) * np.float64(scale)
    return np.outer(effective, inverse_frequencies(head_dim, base))


@dataclass(frozen=True)
class RopeTable:
    head_dim: int
    base: float
    scale: float
    pretrained_ctx: int
    target_ctx: int
    cos: np.ndarray = field(repr=False)
    sin: np.ndarray = field(repr=False)

    @property
    def max_pos(self) -> int:
        return self.cos.shape[0]

    def angles_at(self, positions) -> np.ndarray:
        return rope_angles(positions, self.scale, self.head_dim, self.base)

    def effective_positions(self, positions) -> np.ndarray:
        return np.asarray(positions, dtype=np.float64) * np.float64(self.scale)


def build_rope_table(
    head_dim: int,
    base: float = DEFAULT_BASE,
    pretrained_ctx: int = 4096,
    target_ctx: int = 4096,
    max_pos: int | None = None,
) -> RopeTable:
    if head_dim <= 0 or head_dim % 2:
        raise ConfigError(f"head_dim must be a positive even number, got {head_dim}")
    if pretrained_ctx < 1 or target_ctx < 1:
        raise ConfigError("context lengths must be positive")
    if target_ctx < pretrained_ctx:
        raise ConfigError(f"target_ctx {target_ctx} is shorter than pretrained_ctx {pretrained_ctx}")
    if max_pos is None:
        max_pos = target_ctx
    if not 1 <= max_pos <= target_ctx:
        raise ConfigError(f"max_pos must lie in [1, {target_ctx}], got {max_pos}")
    scale = pretrained_ctx / target_ctx
    angles = rope_angles(np.arange(max_pos), scale, head_dim, base)
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    cos.flags.writeable = False
    sin.flags.writeable = False
    return RopeTable(head_dim, float(base), scale, pretrained_ctx, target_ctx, cos, sin)


def rotate_pairs(x: Tensor, cos: np.ndarray, sin: np.ndarray) -> Tensor:
    """Rotate interleaved pairs ``(x[2i], x[2i+1])`` of a (seq, heads, head_dim) tensor.

    ``cos``/``sin`` have shape (seq, head_dim/2).
    """
    c = cos[:, None, :].astype(x.dtype, copy=False)
    s = sin[:, None, :].astype(x.dtype, copy=False)
    even = x.data[..., 0::2]
    odd = x.data[..., 1::2]
    out = np.empty_like(x.data)
    out[..., 0::2] = even * c - odd * s
    out[..., 1::2] = even * s + odd * c

    def _back(g):
        ge = g[..., 0::2]
        go = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * c + go * s
        gx[..., 1::2] = -ge * s + go * c
        return (gx,)

    return Tensor.from_op(out, (x,), _back, "rope")


def apply_rope(x: Tensor, positions, table: RopeTable, inverse: bool = False) -> Tensor:
    """Rotate queries or keys (seq, heads, head_dim) by their table angles."""
    positions = np.asarray(positions, dtype=np.int64)
    if x.ndim != 3 or x.shape[-1] != table.head_dim:
        raise ConfigError(f"expected (seq, heads, {table.head_dim}), got {x.shape}")
    if positions.shape != (x.shape[0],):
        raise ConfigError("need exactly one position per sequence element")
    if positions.size and (positions.min() < 0 or positions.max() >= table.max_pos):
        raise PositionError(f"positions must lie in [0, {table.max_pos})")
    sin = table.sin[positions]
    return rotate_pairs(x, table.cos[positions], -sin if inverse else sin)


def interpolation_equivalence_check(m: int, table_scaled: RopeTable, table_unscaled: RopeTable, tol: float = 1e-6) -> bool:
    """True iff position ``m`` under the scaled table rotates exactly like ``m * scale`` unscaled."""
    if table_unscaled.scale != 1.0:
        raise ConfigError("reference table must have scale 1")
    if m < table_scaled.max_pos:
        cos_s = table_scaled.cos[m].astype(np.float64)
        sin_s = table_scaled.sin[m].astype(np.float64)
    else:
        ang = table_scaled.angles_at([m])[0]
        cos_s = np.cos(ang).astype(np.float32).astype(np.float64)
        sin_s = np.sin(ang).astype(np.float32).astype(np.float64)
    effective = m * table_scaled.scale
    ang_u = table_unscaled.angles_at([effective])[0]
    cos_u = np.cos(ang_u).astype(np.float32).astype(np.float64)
    sin_u = np.sin(ang_u).astype(np.float32).astype(np.float64)
    return bool(np.all(np.abs(cos_s - cos_u) <= tol) and np.all(np.abs(sin_s - sin_u) <= tol))
