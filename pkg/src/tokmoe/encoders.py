"""Measure tokenization: one d-dimensional token per measure.

Vector measures (region profiles, tract metrics, hormone panels) run through
a per-element projection, learned positional embeddings, a small transformer
over the elements, and mean pooling. Scalar measures (age, sex, ...) are a
single linear projection. Every measure owns independent weights, so before
any cross-token mixing, token t depends on measure t alone.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigError, SchemaError, ShapeError
from .nn import EncoderStackParams, LinearParams, encoder_stack, glorot_uniform, linear
from .tensor import Tensor


class VectorEncoderParams:
    """Weights for one vector measure of ``length`` elements.

    ``proj`` lifts each scalar element to d dims, ``pos`` adds a learned
    per-position row, and ``stack`` mixes the elements before mean pooling.
    """

    def __init__(self, rng: np.random.Generator, length: int, dim: int,
                 depth: int = 1, n_heads: int = 1):
        if length < 1:
            raise ConfigError(f"vector measure length must be >= 1, got {length}")
        self.length = length
        self.dim = dim
        self.proj = LinearParams(rng, 1, dim)
        self.pos = Tensor(glorot_uniform(rng, length, dim, (length, dim)),
                          requires_grad=True)
        self.stack = EncoderStackParams(rng, depth, dim, n_heads, 4 * dim)

    def named_params(self, prefix: str):
        return (self.proj.named_params(f"{prefix}.proj")
                + [(f"{prefix}.pos", self.pos)]
                + self.stack.named_params(f"{prefix}.stack"))


class ScalarEncoderParams:
    """Weights for one scalar measure: a single 1 -> d projection."""

    def __init__(self, rng: np.random.Generator, dim: int):
        self.dim = dim
        self.proj = LinearParams(rng, 1, dim)

    def named_params(self, prefix: str):
        return self.proj.named_params(f"{prefix}.proj")


def encode_vector_measure(x, params: VectorEncoderParams) -> Tensor:
    """Encode a vector measure to one token.

    ``x`` is (length,) for a single record or (batch, length); the result is
    (dim,) or (batch, dim) accordingly.
    """
    x = T.as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, x.shape[0])
    if x.shape[-1] != params.length:
        raise SchemaError(
            f"vector measure has {x.shape[-1]} elements, encoder expects {params.length}")
    b, n = x.shape
    h = linear(x.reshape(b, n, 1), params.proj) + params.pos
    h, _ = encoder_stack(h, params.stack)
    token = h.mean(axis=1)
    return token.reshape(params.dim) if single else token


def encode_scalar_measure(s, params: ScalarEncoderParams) -> Tensor:
    """Encode a scalar measure to one token: weight * s + bias.

    ``s`` is a scalar or a (batch,) column; the result is (dim,) or
    (batch, dim).
    """
    s = T.as_tensor(s)
    if s.ndim > 1:
        raise ShapeError(f"scalar measure expects a scalar or (batch,), got {s.shape}")
    single = s.ndim == 0
    b = 1 if single else s.shape[0]
    token = linear(s.reshape(b, 1), params.proj)
    return token.reshape(params.dim) if single else token


def build_encoders(rng: np.random.Generator, schema, dim: int,
                   depth: int = 1, n_heads: int = 1) -> dict:
    """Create one independent encoder per schema measure, in schema order.

    Parameters are keyed by measure name, so a reordered schema reuses the
    same per-measure weights.
    """
    encoders: dict[str, VectorEncoderParams | ScalarEncoderParams] = {}
    for m in schema.measures:
        if m.kind == "vector":
            encoders[m.name] = VectorEncoderParams(rng, m.length, dim, depth, n_heads)
        else:
            encoders[m.name] = ScalarEncoderParams(rng, dim)
    return encoders


def tokenize(values: dict, encoders: dict, schema) -> tuple[Tensor, list[str]]:
    """Map normalized per-measure values to the token sequence.

    ``values`` maps measure name to a (batch, length) array for vectors or a
    (batch,) array for scalars. Returns tokens shaped (batch, T, dim) plus the
    token names in schema order.
    """
    tokens = []
    names = []
    for m in schema.measures:
        if m.name not in values:
            raise SchemaError(f"record is missing measure {m.name!r}")
        enc = encoders[m.name]
        if m.kind == "vector":
            tok = encode_vector_measure(values[m.name], enc)
        else:
            tok = encode_scalar_measure(values[m.name], enc)
        b, d = tok.shape
        tokens.append(tok.reshape(b, 1, d))
        names.append(m.name)
    return T.concat(tokens, axis=1), names
