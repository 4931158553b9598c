"""Decoder-only transformer over a frozen 4-bit base with low-rank adapters."""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field, fields

import numpy as np

from .attention import AttentionPattern, AttentionStats, GlobalPattern, ShiftShortPattern, attend, make_pattern
from .errors import ConfigError, ContractError, DataError, DimensionError, LengthError, StateError
from .lora import PROJECTIONS, LoraAdapter, adapted_forward, init_adapter, projection_shapes
from .quant import QuantizedTensor, dequantize_array, quantize_tensor
from .rope import DEFAULT_BASE, RopeTable, apply_rope, build_rope_table
from .tensor import Tensor, embedding, log_softmax, matmul, rms_norm, silu, take_last

INIT_STD = 0.02


@dataclass
class ModelConfig:
    vocab_size: int = 257
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 172
    pretrained_ctx: int = 64
    target_ctx: int = 128
    rope_base: float = DEFAULT_BASE
    attention: str = "shift_short"
    group_size: int = 0
    lora_rank: int = 8
    lora_alpha: float = 16.0
    block_size: int = 64
    double_quant: bool = True
    superblock_size: int = 256
    quantize_embeddings: bool = True
    tie_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if (self.d_model // self.n_heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.target_ctx < self.pretrained_ctx:
            raise ConfigError("target_ctx must be at least pretrained_ctx")
        if self.attention not in ("global", "shift_short"):
            raise ConfigError(f"unknown attention pattern {self.attention!r}")
        if self.attention == "shift_short" and not self.group_size:
            self.group_size = self.target_ctx // 4
        if min(self.vocab_size, self.n_layers, self.d_ff, self.lora_rank) < 1:
            raise ConfigError("sizes and rank must be positive")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def rope_scale(self) -> float:
        return self.pretrained_ctx / self.target_ctx

    def train_pattern(self) -> AttentionPattern:
        return make_pattern(self.attention, self.group_size or None)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_mapping(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in items:
                kwargs[f.name] = coerce(items[f.name], type(f.default))
        return cls(**kwargs)


def coerce(text: str, kind: type):
    if kind is bool:
        lowered = str(text).strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    try:
        return kind(text)
    except ValueError:
        raise ConfigError(f"cannot read {text!r} as {kind.__name__}") from None


def weight_shapes(config: ModelConfig) -> dict[str, tuple[int, int]]:
    """Every frozen 2-D base matrix as (rows, cols); projections are (d_out, d_in)."""
    shapes = {"embed": (config.vocab_size, config.d_model)}
    per_layer = projection_shapes(config.d_model, config.d_ff)
    for i in range(config.n_layers):
        for proj in PROJECTIONS:
            d_in, d_out = per_layer[proj]
            shapes[f"layer{i}.{proj}"] = (d_out, d_in)
    if not config.tie_embeddings:
        shapes["head"] = (config.vocab_size, config.d_model)
    return shapes


def norm_names(config: ModelConfig) -> list[str]:
    names = []
    for i in range(config.n_layers):
        names += [f"layer{i}.attn_norm", f"layer{i}.ffn_norm"]
    return names + ["final_norm"]


class Model:
    def __init__(self, config: ModelConfig, base: dict[str, np.ndarray], norms: dict[str, np.ndarray],
                 adapters: dict[str, LoraAdapter]):
        self.config = config
        self.rope: RopeTable = build_rope_table(
            config.head_dim, config.rope_base, config.pretrained_ctx, config.target_ctx
        )
        self.base = {k: _frozen(v) for k, v in base.items()}
        self.norms = {k: Tensor(_frozen(v)) for k, v in norms.items()}
        self.adapters = adapters
        self.quantized: dict[str, QuantizedTensor] = {}
        self.merged: dict[str, np.ndarray] | None = None
        self._cache: dict[tuple[str, bool], np.ndarray] = {}
        self.requantize()

    # -- weights ------------------------------------------------------------------

    def requantize(self) -> None:
        cfg = self.config
        self.quantized = {
            name: quantize_tensor(w, cfg.block_size, cfg.double_quant, cfg.superblock_size)
            for name, w in self.base.items()
            if cfg.quantize_embeddings or name not in ("embed", "head")
        }
        for q in self.quantized.values():
            q.packed.flags.writeable = False
        self._cache.clear()

    def dense_weight(self, name: str, quantized: bool = True) -> np.ndarray:
        """Base weight as used in the forward pass, transposed to (d_in, d_out)."""
        key = (name, quantized and name in self.quantized)
        cached = self._cache.get(key)
        if cached is None:
            w = dequantize_array(self.quantized[name]) if key[1] else self.base[name]
            cached = _frozen(np.ascontiguousarray(w.T))
            self._cache[key] = cached
        return cached

    def set_base(self, base: dict[str, np.ndarray], norms: dict[str, np.ndarray] | None = None) -> None:
        """Replace the pretrained weights (after a full-precision pretraining stage)."""
        if set(base) != set(self.base):
            raise ContractError("base weight names do not match")
        self.base = {k: _frozen(np.asarray(v, dtype=np.float32)) for k, v in base.items()}
        if norms is not None:
            self.norms = {k: Tensor(_frozen(np.asarray(v, dtype=np.float32))) for k, v in norms.items()}
        self.requantize()

    def with_context(self, pretrained_ctx: int, target_ctx: int, **changes) -> "Model":
        """Same weights under a different position-interpolation setting."""
        cfg = self.config.replace(pretrained_ctx=pretrained_ctx, target_ctx=target_ctx, **changes)
        if cfg.attention == "shift_short" and "group_size" not in changes:
            cfg.group_size = target_ctx // 4
        clone = Model(cfg, self.base, {k: v.data for k, v in self.norms.items()}, self.adapters)
        return clone

    def fork(self, config: ModelConfig | None = None, adapters: dict[str, LoraAdapter] | None = None) -> "Model":
        """Shallow copy sharing the frozen weights, with a new config and/or adapter set."""
        clone = copy.copy(self)
        if config is not None:
            clone.config = config
        if adapters is not None:
            clone.adapters = adapters
        clone.merged = None
        return clone

    def adapter_parameters(self) -> list[Tensor]:
        params = []
        for name in sorted(self.adapters):
            params += self.adapters[name].parameters()
        return params

    def trainable_count(self) -> int:
        return sum(t.data.size for t in self.adapter_parameters() if t.requires_grad)

    def merge_adapters(self, quantized: bool = True) -> None:
        if self.merged is not None:
            raise StateError("adapters are already merged")
        self.merged = {}
        for name, adapter in self.adapters.items():
            w = self.dense_weight(name, quantized).T
            self.merged[name] = _frozen(np.ascontiguousarray((w + adapter.delta()).T))

    def unmerge_adapters(self) -> None:
        self.merged = None

    # -- forward ------------------------------------------------------------------

    def _project(self, h: Tensor, name: str, quantized: bool, params) -> Tensor:
        if params is not None and name in params:
            return matmul(h, params[name].transpose(1, 0))
        if self.merged is not None:
            return matmul(h, Tensor(self.merged[name]))
        return adapted_forward(h, None, self.adapters.get(name), base_t=self.dense_weight(name, quantized))

    def _norm(self, name: str, params) -> Tensor:
        if params is not None and name in params:
            return params[name]
        return self.norms[name]

    def forward(self, tokens, pattern: AttentionPattern | None = None, quantized: bool = True,
                stats: AttentionStats | None = None, params: dict[str, Tensor] | None = None) -> Tensor:
        """Next-token logits (seq, vocab).

        ``params`` substitutes trainable tensors for named base weights and
        norms; it exists for full-precision pretraining of the base.
        """
        cfg = self.config
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 1 or tokens.size == 0:
            raise DimensionError("tokens must be a non-empty 1-D sequence")
        n = tokens.size
        if n > cfg.target_ctx:
            raise LengthError(f"sequence of {n} tokens exceeds target_ctx {cfg.target_ctx}")
        if tokens.min() < 0 or tokens.max() >= cfg.vocab_size:
            raise DataError("token id out of vocabulary range")
        pattern = pattern or GlobalPattern()
        heads, hd = cfg.n_heads, cfg.head_dim
        positions = np.arange(n)

        if params is not None and "embed" in params:
            table = params["embed"]
        else:
            table = Tensor(self.dense_weight("embed", quantized).T)
        x = embedding(table, tokens)
        for i in range(cfg.n_layers):
            p = f"layer{i}."
            h = rms_norm(x, self._norm(p + "attn_norm", params))
            q = self._project(h, p + "q_proj", quantized, params).reshape(n, heads, hd)
            k = self._project(h, p + "k_proj", quantized, params).reshape(n, heads, hd)
            v = self._project(h, p + "v_proj", quantized, params).reshape(n, heads, hd)
            q = apply_rope(q, positions, self.rope)
            k = apply_rope(k, positions, self.rope)
            a = attend(q, k, v, pattern, stats).reshape(n, cfg.d_model)
            x = x + self._project(a, p + "o_proj", quantized, params)
            h = rms_norm(x, self._norm(p + "ffn_norm", params))
            gate = self._project(h, p + "gate_proj", quantized, params)
            up = self._project(h, p + "up_proj", quantized, params)
            x = x + self._project(silu(gate) * up, p + "down_proj", quantized, params)
        x = rms_norm(x, self._norm("final_norm", params))
        head_name = "embed" if cfg.tie_embeddings else "head"
        if params is not None and head_name in params:
            return matmul(x, params[head_name].transpose(1, 0))
        return matmul(x, Tensor(self.dense_weight(head_name, quantized)))


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float32, copy=True) if arr.flags.writeable else arr
    arr.flags.writeable = False
    return arr


def build_model(config: ModelConfig) -> Model:
    """Random base weights, unit norms and zero-initialised adapters, all from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    base = {
        name: rng.normal(0.0, INIT_STD, size=shape).astype(np.float32)
        for name, shape in weight_shapes(config).items()
    }
    norms = {name: np.ones(config.d_model, dtype=np.float32) for name in norm_names(config)}
    adapters = fresh_adapters(config)
    return Model(config, base, norms, adapters)


def fresh_adapters(config: ModelConfig, rank: int | None = None) -> dict[str, LoraAdapter]:
    rank = rank or config.lora_rank
    shapes = projection_shapes(config.d_model, config.d_ff)
    adapters = {}
    for i in range(config.n_layers):
        for j, proj in enumerate(PROJECTIONS):
            name = f"layer{i}.{proj}"
            d_in, d_out = shapes[proj]
            seed = config.seed + 1000 + i * len(PROJECTIONS) + j
            adapters[name] = init_adapter(d_in, d_out, rank, config.lora_alpha, seed, target=name)
    return adapters


# -- loss ------------------------------------------------------------------------


def masked_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Mean next-token NLL over positions where ``mask`` is true."""
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],) or mask.shape != targets.shape:
        raise DimensionError(f"logits {logits.shape}, targets {targets.shape}, mask {mask.shape} disagree")
    count = int(mask.sum())
    if count == 0:
        raise ContractError("loss mask selects no positions")
    picked = take_last(log_softmax(logits), targets)
    weights = Tensor(mask.astype(logits.dtype))
    return (picked * weights).sum() * (-1.0 / count)


def token_nll(logits: Tensor, targets) -> np.ndarray:
    """Per-position negative log-likelihood in float64 (no graph)."""
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    targets = np.asarray(targets, dtype=np.int64)
    return lse - z[np.arange(z.shape[0]), targets]


def sequence_loss(model: Model, tokens, mask=None, pattern: AttentionPattern | None = None,
                  quantized: bool = True, params=None) -> Tensor:
    """Loss of predicting ``tokens[1:]`` from ``tokens[:-1]``; ``mask`` covers ``tokens``."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 2:
        raise LengthError("need at least two tokens")
    mask = np.ones(tokens.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    logits = model.forward(tokens[:-1], pattern, quantized=quantized, params=params)
    return masked_cross_entropy(logits, tokens[1:], mask[1:])
