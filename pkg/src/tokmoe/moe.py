"""Token-wise mixture of experts with dense soft routing.

A gating network scores every token against E experts through a temperature
softmax; each expert is a two-layer MLP applied to the token independently.
Every expert evaluates every token (no top-k dispatch), and the output token
is the gate-weighted sum of the expert outputs. There is no residual path:
the mixture replaces the token representation.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LinearParams, linear
from .tensor import Tensor


class ExpertParams:
    """One expert: d -> hidden -> d MLP with GELU between the layers."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.lin1 = LinearParams(rng, dim, hidden)
        self.lin2 = LinearParams(rng, hidden, dim)

    def named_params(self, prefix: str):
        return (self.lin1.named_params(f"{prefix}.lin1")
                + self.lin2.named_params(f"{prefix}.lin2"))


class MoEParams:
    """Gate projection, E expert MLPs, and the gate temperature."""

    def __init__(self, rng: np.random.Generator, dim: int, n_experts: int,
                 tau_e: float = 1.0, hidden: int | None = None):
        if n_experts < 1:
            raise ConfigError(f"need at least one expert, got {n_experts}")
        if not tau_e > 0.0:
            raise ConfigError(f"gate temperature must be positive, got {tau_e}")
        hidden = dim if hidden is None else hidden
        self.gate = LinearParams(rng, dim, n_experts)
        self.experts = [ExpertParams(rng, dim, hidden) for _ in range(n_experts)]
        self.tau_e = float(tau_e)
        self.n_experts = n_experts
        self.dim = dim

    def named_params(self, prefix: str):
        out = self.gate.named_params(f"{prefix}.gate")
        for e, expert in enumerate(self.experts):
            out.extend(expert.named_params(f"{prefix}.expert{e}"))
        return out


def gate(z: Tensor, params: MoEParams) -> Tensor:
    """Per-token expert weights: temperature softmax of the gate logits.

    ``z`` is (batch, T, d); the result is (batch, T, E) with every row on the
    last axis summing to 1.
    """
    return T.softmax_temp(linear(z, params.gate), tau=params.tau_e, axis=-1)


def expert_forward(z: Tensor, expert: ExpertParams) -> Tensor:
    return linear(T.gelu(linear(z, expert.lin1)), expert.lin2)


def moe_forward(z: Tensor, params: MoEParams) -> tuple[Tensor, Tensor]:
    """Mix expert outputs per token: u_t = sum_e alpha_te * Expert_e(z_t).

    Returns the mixed tokens (batch, T, d) and the gate weights
    (batch, T, E).
    """
    alpha = gate(z, params)
    u = None
    for e, expert in enumerate(params.experts):
        weighted = alpha[..., e : e + 1] * expert_forward(z, expert)
        u = weighted if u is None else u + weighted
    return u, alpha


def expert_load(alpha: np.ndarray) -> np.ndarray:
    """Mean gate mass per (token, expert) over the batch axis: (T, E)."""
    alpha = np.asarray(alpha)
    if alpha.ndim != 3:
        raise ConfigError(f"expert_load expects (batch, T, E) gate weights, got {alpha.shape}")
    return alpha.mean(axis=0)
