"""Token-importance pooling and the classification head.

A linear scorer assigns each token a raw importance, a temperature softmax
normalizes the scores into weights pi that sum to 1, and the pooled vector is
the pi-weighted sum of tokens. The scorer starts at zero so training begins
from the uniform 1/T baseline, which also makes the importance-weighted head
coincide exactly with plain mean pooling at initialization. A two-layer MLP
maps the pooled vector to binary logits.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError
from .nn import LinearParams, linear
from .tensor import Tensor


class ImportanceParams:
    """Zero-initialized token scorer (w, b) plus the softmax temperature."""

    def __init__(self, dim: int, tau_p: float = 1.0):
        if not tau_p > 0.0:
            raise ConfigError(f"importance temperature must be positive, got {tau_p}")
        self.w = Tensor(np.zeros(dim), requires_grad=True)
        self.b = Tensor(0.0, requires_grad=True)
        self.tau_p = float(tau_p)
        self.dim = dim

    def named_params(self, prefix: str):
        return [(f"{prefix}.w", self.w), (f"{prefix}.b", self.b)]


def _weighted_pool(u: Tensor, pi: Tensor) -> Tensor:
    b, t, d = u.shape
    return T.matmul(pi.reshape(b, 1, t), u).reshape(b, d)


def importance_pool(u: Tensor, params: ImportanceParams) -> tuple[Tensor, Tensor]:
    """Score, normalize, and pool the tokens.

    ``u`` is (batch, T, d); returns pooled (batch, d) and pi (batch, T).
    The scalar offset b shifts every score equally, so it never changes pi.
    """
    beta = T.matmul(u, params.w) + params.b
    pi = T.softmax_temp(beta, tau=params.tau_p, axis=-1)
    return _weighted_pool(u, pi), pi


def avg_pool(u: Tensor) -> tuple[Tensor, Tensor]:
    """Uniform mean over tokens, routed through the same pooling product.

    Returns pooled (batch, d) and the constant pi = 1/T rows, so downstream
    reporting treats both heads identically.
    """
    b, t, d = u.shape
    pi = T.as_tensor(np.full((b, t), 1.0 / t))
    return _weighted_pool(u, pi), pi


class ClassifierParams:
    """Two-layer head d -> hidden -> 2 with GELU in between."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int | None = None):
        hidden = dim if hidden is None else hidden
        self.lin1 = LinearParams(rng, dim, hidden)
        self.lin2 = LinearParams(rng, hidden, 2)

    def named_params(self, prefix: str):
        return (self.lin1.named_params(f"{prefix}.lin1")
                + self.lin2.named_params(f"{prefix}.lin2"))


def classify(pooled: Tensor, params: ClassifierParams) -> Tensor:
    """Binary logits (batch, 2) from the pooled representation."""
    return linear(T.gelu(linear(pooled, params.lin1)), params.lin2)


def probability(logits: Tensor) -> np.ndarray:
    """Probability of the positive class from (batch, 2) logits."""
    p = T.softmax_temp(logits, tau=1.0, axis=-1)
    return p.data[..., 1]
