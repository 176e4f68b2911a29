"""Finite-difference verification of the end-to-end gradients.

For each parameter tensor (one "group" per named tensor), sampled coordinates
are perturbed by +/- eps and the loss re-evaluated; the central difference is
compared against the reverse-mode gradient with a floored relative error.
Sampling keeps the runtime bounded while still touching every group; passing
samples_per_group=None sweeps every coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Schema
from .errors import ConfigError
from .model import ModelParams, forward
from .nn import cross_entropy
from .tensor import backward

REL_ERR_FLOOR = 1e-6


@dataclass(frozen=True)
class GroupReport:
    """Result for one parameter tensor."""

    name: str
    n_checked: int
    max_rel_err: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERR_FLOOR)


def check_gradients(params: ModelParams, values: dict, labels: np.ndarray,
                    eps: float = 1e-5, samples_per_group: int | None = 4,
                    sample_seed: int = 0) -> list[GroupReport]:
    """Compare reverse-mode gradients to central differences per group."""
    if eps <= 0.0:
        raise ConfigError(f"finite-difference step must be positive, got {eps}")

    def loss_value() -> float:
        trace = forward(params, values)
        return cross_entropy(trace.logits, labels).item()

    named = params.named_params()
    for _, t in named:
        t.grad = None
    trace = forward(params, values)
    backward(cross_entropy(trace.logits, labels))

    rng = np.random.default_rng(sample_seed)
    reports: list[GroupReport] = []
    for name, t in named:
        size = t.data.size
        if samples_per_group is None or samples_per_group >= size:
            coords = np.arange(size)
        else:
            coords = rng.choice(size, size=samples_per_group, replace=False)
        flat = t.data.reshape(-1)
        grad = (np.zeros(size) if t.grad is None else t.grad.reshape(-1))
        worst = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + eps
            up = loss_value()
            flat[c] = keep - eps
            down = loss_value()
            flat[c] = keep
            numeric = (up - down) / (2.0 * eps)
            worst = max(worst, relative_error(float(grad[c]), numeric))
        reports.append(GroupReport(name=name, n_checked=len(coords), max_rel_err=worst))
    return reports


def small_check_schema() -> Schema:
    """Compact mixed schema for fast verification runs: 6 tokens."""
    from .data import Measure

    return Schema(name="gradcheck6", measures=(
        Measure(name="profile_a", kind="vector", length=4, rule="none", group="A"),
        Measure(name="profile_b", kind="vector", length=3, rule="none", group="A"),
        Measure(name="tract", kind="vector", length=5, rule="none", group="B"),
        Measure(name="panel", kind="vector", length=2, rule="none", group="B"),
        Measure(name="age", kind="scalar", length=1, rule="none", group="C"),
        Measure(name="sex", kind="scalar", length=1, rule="none", group="C"),
    ))
