"""Low-rank adapters over frozen (quantized) projection weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .quant import QuantizedTensor, dequantize_array
from .tensor import Tensor, matmul

PROJECTIONS = ("q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj")
DEFAULT_ALPHA = 16.0


def projection_shapes(d_model: int, d_ff: int) -> dict[str, tuple[int, int]]:
    """``(d_in, d_out)`` for each adapted projection of one decoder layer."""
    return {
        "q_proj": (d_model, d_model),
        "k_proj": (d_model, d_model),
        "v_proj": (d_model, d_model),
        "o_proj": (d_model, d_model),
        "gate_proj": (d_model, d_ff),
        "up_proj": (d_model, d_ff),
        "down_proj": (d_ff, d_model),
    }


@dataclass
class LoraAdapter:
    target: str
    A: Tensor
    B: Tensor
    rank: int
    alpha: float

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def d_in(self) -> int:
        return self.A.shape[1]

    @property
    def d_out(self) -> int:
        return self.B.shape[0]

    @property
    def param_count(self) -> int:
        return self.rank * (self.d_in + self.d_out)

    def parameters(self) -> list[Tensor]:
        return [self.A, self.B]

    def delta(self) -> np.ndarray:
        """The implied weight update ``scaling * B @ A`` with shape (d_out, d_in)."""
        return (np.float32(self.scaling) * (self.B.data @ self.A.data)).astype(self.A.dtype)


def init_adapter(d_in: int, d_out: int, rank: int, alpha: float = DEFAULT_ALPHA, seed: int = 0,
                 target: str = "") -> LoraAdapter:
    """Gaussian ``A`` with std ``1/sqrt(rank)`` and all-zero ``B``."""
    if rank < 1 or rank > min(d_in, d_out):
        raise ConfigError(f"rank {rank} must lie in [1, {min(d_in, d_out)}]")
    if alpha <= 0:
        raise ConfigError("alpha must be positive")
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, 1.0 / math.sqrt(rank), size=(rank, d_in)).astype(np.float32)
    b = np.zeros((d_out, rank), dtype=np.float32)
    return LoraAdapter(target, Tensor(a, requires_grad=True), Tensor(b, requires_grad=True), rank, float(alpha))


def _base_matrix(base) -> np.ndarray:
    if isinstance(base, QuantizedTensor):
        return dequantize_array(base)
    if isinstance(base, Tensor):
        return base.data
    return np.asarray(base)


def adapted_forward(x: Tensor, base, adapter: LoraAdapter | None, base_t: np.ndarray | None = None) -> Tensor:
    """``x @ W.T + scaling * (x @ A.T) @ B.T`` for rows of ``x``.

    ``base`` is the frozen (d_out, d_in) weight, quantized or dense.  Callers
    that already hold ``W.T`` may pass it as ``base_t`` to skip the transpose.
    """
    if base_t is None:
        w = _base_matrix(base)
        if w.ndim != 2:
            raise DimensionError("base weight must be 2-D")
        base_t = w.T
    if x.shape[-1] != base_t.shape[0]:
        raise DimensionError(f"input width {x.shape[-1]} does not match weight {base_t.shape[::-1]}")
    y = matmul(x, Tensor(base_t))
    if adapter is None:
        return y
    if adapter.d_in != base_t.shape[0] or adapter.d_out != base_t.shape[1]:
        raise DimensionError(f"adapter {adapter.target} shape does not match its base weight")
    low = matmul(matmul(x, adapter.A.transpose(1, 0)), adapter.B.transpose(1, 0))
    return y + low * adapter.scaling


def merge_adapter(base, adapter: LoraAdapter) -> Tensor:
    w = _base_matrix(base)
    if w.shape != (adapter.d_out, adapter.d_in):
        raise DimensionError(f"cannot merge adapter of shape {(adapter.d_out, adapter.d_in)} into {w.shape}")
    return Tensor((w + adapter.delta()).astype(np.float32))


def trainable_param_count(config) -> int:
    """Adapter parameters for a model config; embeddings, norms and base weights excluded."""
    shapes = projection_shapes(config.d_model, config.d_ff)
    per_layer = sum(config.lora_rank * (d_in + d_out) for d_in, d_out in shapes.values())
    return config.n_layers * per_layer
