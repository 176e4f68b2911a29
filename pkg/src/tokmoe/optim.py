"""AdamW with decoupled weight decay, warmup/cosine schedule, training loop.

The decay term multiplies parameters by (1 - lr * wd) before the moment
update is applied, so a zero-gradient step is exactly that scaling. The
learning rate ramps linearly from 0 over the warmup steps, reaches base_lr
exactly at the boundary, then follows a half cosine down to exactly 0 at the
final step.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .data import Schema, SubjectRecord, labels_of, stack_values
from .errors import ConfigError, DataError
from .model import ModelParams, forward
from .nn import cross_entropy
from .tensor import Tensor, backward


@dataclass(frozen=True)
class Schedule:
    """Per-step learning-rate plan: linear warmup then cosine decay."""

    base_lr: float
    steps_per_epoch: int
    total_epochs: int = 50
    warmup_epochs: int = 5

    def __post_init__(self):
        if self.base_lr <= 0.0:
            raise ConfigError(f"base_lr must be positive, got {self.base_lr}")
        if self.steps_per_epoch < 1 or self.total_epochs < 1:
            raise ConfigError("schedule needs at least one step and one epoch")
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ConfigError("warmup_epochs must lie within total_epochs")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, sched: Schedule) -> float:
    """Learning rate for optimizer step ``step`` (0-based)."""
    if step < 0:
        raise ConfigError(f"step must be >= 0, got {step}")
    w = sched.warmup_steps
    if step < w:
        return sched.base_lr * step / w
    span = sched.total_steps - 1 - w
    progress = 1.0 if span <= 0 else min((step - w) / span, 1.0)
    return sched.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam over an ordered (name, Tensor) list.

    Construction consolidates all parameters into one flat buffer and rebinds
    each tensor's ``data`` to a view of it, so an update is a few vectorized
    passes regardless of how many tensors the model has.
    """

    def __init__(self, named_params: list[tuple[str, Tensor]],
                 weight_decay: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if not named_params:
            raise ConfigError("optimizer needs at least one parameter")
        if weight_decay < 0.0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        self.params = list(named_params)
        self.weight_decay = float(weight_decay)
        self.betas = betas
        self.eps = float(eps)
        self.step_count = 0
        total = sum(t.data.size for _, t in self.params)
        self._theta = np.empty(total)
        self._m = np.zeros(total)
        self._v = np.zeros(total)
        self._g = np.empty(total)
        self._scratch = np.empty(total)
        self._slices: list[tuple[int, int]] = []
        off = 0
        for _, t in self.params:
            n = t.data.size
            self._theta[off : off + n] = t.data.reshape(-1)
            t.data = self._theta[off : off + n].reshape(t.data.shape)
            self._slices.append((off, n))
            off += n

    def zero_grad(self) -> None:
        for _, t in self.params:
            t.grad = None

    def step(self, lr: float) -> None:
        """One update using gradients in ``.grad`` (missing grads count as 0).

        Decay multiplies parameters by (1 - lr * wd) first, so with a zero
        gradient and zero moments the step is exactly that scaling.
        """
        b1, b2 = self.betas
        self.step_count += 1
        step_scale = lr / (1.0 - b1 ** self.step_count)
        denom_scale = 1.0 / math.sqrt(1.0 - b2 ** self.step_count)
        g = self._g
        for (off, n), (name, t) in zip(self._slices, self.params):
            if t.grad is None:
                g[off : off + n] = 0.0
            else:
                if t.grad.shape != t.data.shape:
                    raise ConfigError(f"gradient shape {t.grad.shape} does not "
                                      f"match parameter {name} shape {t.data.shape}")
                g[off : off + n] = t.grad.reshape(-1)
        m, v, scratch = self._m, self._v, self._scratch
        m *= b1
        np.multiply(g, 1.0 - b1, out=scratch)
        m += scratch
        v *= b2
        np.square(g, out=scratch)
        scratch *= 1.0 - b2
        v += scratch
        np.sqrt(v, out=scratch)
        scratch *= denom_scale
        scratch += self.eps
        np.divide(m, scratch, out=scratch)
        scratch *= step_scale
        self._theta *= 1.0 - lr * self.weight_decay
        self._theta -= scratch


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults match the reference training setup."""

    epochs: int = 50
    batch_size: int = 16
    base_lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_epochs: int = 5
    shuffle_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


def _batches(n: int, batch_size: int, perm: np.ndarray):
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def train(params: ModelParams, records: list[SubjectRecord], tconf: TrainConfig,
          schema: Schema | None = None, on_epoch=None) -> list[dict]:
    """Train in place on normalized records; returns per-epoch log entries.

    Mini-batches are reshuffled each epoch from one seeded stream. The final
    epoch's parameters are the result (no early stopping). Log entries hold
    epoch, mean_loss, lr, and wall_s; wall_s is the only timing field.
    ``on_epoch``, when given, receives each entry as it is produced.
    """
    tconf.validate()
    if not records:
        raise DataError("cannot train on an empty dataset")
    schema = params.schema if schema is None else schema
    n = len(records)
    steps_per_epoch = (n + tconf.batch_size - 1) // tconf.batch_size
    sched = Schedule(base_lr=tconf.base_lr, steps_per_epoch=steps_per_epoch,
                     total_epochs=tconf.epochs, warmup_epochs=tconf.warmup_epochs)
    opt = AdamW(params.named_params(), weight_decay=tconf.weight_decay)
    rng = np.random.default_rng(tconf.shuffle_seed)

    log: list[dict] = []
    step = 0
    for epoch in range(tconf.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        loss_sum = 0.0
        lr = 0.0
        for idx in _batches(n, tconf.batch_size, perm):
            batch = [records[i] for i in idx]
            values = stack_values(batch, schema)
            trace = forward(params, values, schema)
            loss = cross_entropy(trace.logits, labels_of(batch))
            opt.zero_grad()
            backward(loss)
            lr = lr_at(step, sched)
            opt.step(lr)
            step += 1
            loss_sum += loss.item() * len(idx)
        entry = {"epoch": epoch, "mean_loss": loss_sum / n, "lr": lr,
                 "wall_s": round(time.perf_counter() - t0, 3)}
        log.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return log
