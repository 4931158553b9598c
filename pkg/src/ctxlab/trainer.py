"""Adapter finetuning: constant learning rate after linear warmup, gradient
accumulation, Adam without weight decay, step-indexed checkpoints.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attention import AttentionPattern, GlobalPattern
from .checkpoint import save_checkpoint
from .data import TrainingSample, cycle_samples
from .errors import ConfigError, DataError, NumericError
from .model import Model, sequence_loss
from .tensor import Tensor, backward

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    warmup_steps: int = 20
    grad_accum_steps: int = 16
    per_device_batch: int = 1
    max_steps: int = 1000
    seed: int = 0
    checkpoint_every: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0

    def __post_init__(self):
        if self.warmup_steps < 1 or self.grad_accum_steps < 1 or self.per_device_batch < 1:
            raise ConfigError("warmup, accumulation and batch size must all be >= 1")
        if self.max_steps < 0 or self.base_lr < 0:
            raise ConfigError("max_steps and base_lr must be non-negative")

    @property
    def global_batch(self) -> int:
        return self.per_device_batch * self.grad_accum_steps

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def lr_at_step(step: int, config: TrainConfig) -> float:
    return config.base_lr * min(1.0, (step + 1) / config.warmup_steps)


class Adam:
    """Adam with bias correction; parameters are replaced, never written in place."""

    def __init__(self, params: Sequence[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.v = [np.zeros_like(p.data, dtype=np.float64) for p in self.params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray], lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            g = g.astype(np.float64)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            update = lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype)


@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    loss: float
    tokens_seen: int

    def line(self) -> str:
        return f"{self.step}\t{self.lr!r}\t{self.loss!r}\t{self.tokens_seen}"


class Trainer:
    """Holds optimizer state across micro-steps.

    ``params`` defaults to the model's adapter tensors.  Passing a dict of
    named tensors instead trains those in place of the frozen base (used for
    the full-precision pretraining stage).
    """

    def __init__(self, model: Model, config: TrainConfig, pattern: AttentionPattern | None = None,
                 quantized: bool = True, params: dict[str, Tensor] | None = None):
        self.model = model
        self.config = config
        self.pattern = pattern if pattern is not None else model.config.train_pattern()
        self.quantized = quantized
        self.named = params
        self.params = list(params.values()) if params is not None else model.adapter_parameters()
        self.optimizer = Adam(self.params, config.beta1, config.beta2, config.eps)
        self.micro = 0
        self.updates = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def micro_step(self, sample: TrainingSample) -> float:
        loss = sequence_loss(self.model, sample.tokens, sample.mask, self.pattern, self.quantized, self.named)
        value = loss.item()
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} at update {self.updates}, micro-step {self.micro}")
        backward(loss)
        return value

    def train_step(self, batch: Sequence[TrainingSample], step: int) -> tuple[float, bool]:
        """One micro-step over ``per_device_batch`` samples.

        Returns the mean loss and whether an optimizer update was applied.
        """
        losses = [self.micro_step(s) for s in batch]
        self.micro += 1
        if self.micro < self.config.grad_accum_steps:
            return float(np.mean(losses)), False
        count = self.config.grad_accum_steps * len(batch)
        grads = [(p.grad if p.grad is not None else np.zeros_like(p.data)) / count for p in self.params]
        if self.config.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
            if norm > self.config.grad_clip:
                grads = [g * (self.config.grad_clip / norm) for g in grads]
        self.optimizer.step(grads, lr_at_step(step, self.config))
        self.zero_grad()
        self.micro = 0
        self.updates += 1
        return float(np.mean(losses)), True


@dataclass
class TrainingLog:
    records: list[StepRecord]

    def lines(self) -> list[str]:
        return ["step\tlr\tloss\ttokens_seen"] + [r.line() for r in self.records]

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.lines()) + "\n")

    @property
    def losses(self) -> list[float]:
        return [r.loss for r in self.records]


def train_loop(model: Model, dataset: Sequence[TrainingSample], config: TrainConfig,
               pattern: AttentionPattern | None = None, checkpoint_dir=None, log_path=None,
               on_step: Callable[[int, Model], None] | None = None, quantized: bool = True,
               params: dict[str, Tensor] | None = None) -> TrainingLog:
    """Run ``config.max_steps`` optimizer updates.

    ``on_step(k, model)`` is called with ``k = 0`` before training and after
    each update ``k``.
    """
    if not dataset:
        raise DataError("dataset is empty")
    trainer = Trainer(model, config, pattern, quantized, params)
    stream = cycle_samples(dataset, config.seed)
    records: list[StepRecord] = []
    tokens_seen = 0
    if on_step is not None:
        on_step(0, model)
    for step in range(config.max_steps):
        micro_losses = []
        updated = False
        while not updated:
            batch = [next(stream) for _ in range(config.per_device_batch)]
            loss, updated = trainer.train_step(batch, step)
            micro_losses.append(loss)
            tokens_seen += sum(s.tokens.size for s in batch)
        rec = StepRecord(step, lr_at_step(step, config), float(np.mean(micro_losses)), tokens_seen)
        records.append(rec)
        log.debug(rec.line())
        if checkpoint_dir is not None and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_checkpoint(model, Path(checkpoint_dir) / f"step_{step + 1:06d}.ckpt", {"step": str(step + 1)})
        if on_step is not None:
            on_step(step + 1, model)
    result = TrainingLog(records)
    if log_path is not None:
        result.write(log_path)
    return result


def pretrain_base(model: Model, dataset: Sequence[TrainingSample], config: TrainConfig,
                  pattern: AttentionPattern | None = None) -> TrainingLog:
    """Full-precision training of every base weight and norm, then re-quantization.

    Stands in for the pretrained checkpoint that adapter finetuning starts from.
    """
    named: dict[str, Tensor] = {}
    for name, w in model.base.items():
        named[name] = Tensor(w.copy(), requires_grad=True)
    for name, w in model.norms.items():
        named[name] = Tensor(w.data.copy(), requires_grad=True)
    result = train_loop(model, dataset, config, pattern or GlobalPattern(), quantized=False, params=named)
    model.set_base(
        {k: named[k].data for k in model.base},
        {k: named[k].data for k in model.norms},
    )
    return result


def snapshot(tensors: Iterable[np.ndarray]) -> list[bytes]:
    return [np.ascontiguousarray(t).tobytes() for t in tensors]
