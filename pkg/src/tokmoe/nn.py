"""Layer building blocks: linear maps, attention, pre-norm transformer layers.

Parameters live in small dataclass-style containers of ``Tensor`` leaves with
``requires_grad=True``. Every container exposes ``named_params(prefix)`` so a
model can flatten its full parameter set into an ordered name -> Tensor
mapping for the optimizer and the checkpoint format.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError
from .tensor import Tensor


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class LinearParams:
    """Affine map ``x @ W.T + b`` with ``weight`` shaped (out, in)."""

    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int,
                 zero_init: bool = False):
        if in_dim <= 0 or out_dim <= 0:
            raise ConfigError(f"linear dims must be positive, got {in_dim}x{out_dim}")
        if zero_init:
            w = np.zeros((out_dim, in_dim))
        else:
            w = glorot_uniform(rng, in_dim, out_dim, (out_dim, in_dim))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return T.affine(x, p.weight, p.bias)


class LayerNormParams:
    """Per-feature gain (ones) and bias (zeros) for layer normalization."""

    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def named_params(self, prefix: str):
        return [(f"{prefix}.gain", self.gain), (f"{prefix}.bias", self.bias)]


def layer_norm(x: Tensor, p: LayerNormParams) -> Tensor:
    return T.layer_norm(x, p.gain, p.bias)


class AttentionParams:
    """Multi-head self-attention projections; ``n_heads`` must divide ``dim``."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int):
        if n_heads <= 0 or dim % n_heads != 0:
            raise ConfigError(f"n_heads={n_heads} must be positive and divide dim={dim}")
        self.wq = LinearParams(rng, dim, dim)
        self.wk = LinearParams(rng, dim, dim)
        self.wv = LinearParams(rng, dim, dim)
        self.wo = LinearParams(rng, dim, dim)
        self.dim = dim
        self.n_heads = n_heads

    def named_params(self, prefix: str):
        out = []
        for name, sub in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            out.extend(sub.named_params(f"{prefix}.{name}"))
        return out


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return T.transpose(x.reshape(b, t, n_heads, d // n_heads), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return T.transpose(x, (0, 2, 1, 3)).reshape(b, t, h * dh)


def self_attention(x: Tensor, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention over (batch, tokens, dim).

    Returns the attended output and the attention weights, shaped
    (batch, heads, tokens, tokens) with rows summing to 1. The single-head
    case skips the head split/merge reshapes.
    """
    q = linear(x, p.wq)
    k = linear(x, p.wk)
    v = linear(x, p.wv)
    scale = 1.0 / math.sqrt(p.dim // p.n_heads)
    if p.n_heads == 1:
        scores = T.matmul(q, T.transpose(k, (0, 2, 1))) * scale
        attn = T.softmax_temp(scores, tau=1.0, axis=-1)
        out = T.matmul(attn, v)
        b, t, _ = x.shape
        return linear(out, p.wo), attn.reshape(b, 1, t, t)
    q, k, v = (_split_heads(h, p.n_heads) for h in (q, k, v))
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * scale
    attn = T.softmax_temp(scores, tau=1.0, axis=-1)
    out = _merge_heads(T.matmul(attn, v))
    return linear(out, p.wo), attn


class FeedForwardParams:
    """Two-layer position-wise network expanding to ``hidden`` with GELU."""

    def __init__(self, rng: np.random.Generator, dim: int, hidden: int):
        self.lin1 = LinearParams(rng, dim, hidden)
        self.lin2 = LinearParams(rng, hidden, dim)

    def named_params(self, prefix: str):
        return (self.lin1.named_params(f"{prefix}.lin1")
                + self.lin2.named_params(f"{prefix}.lin2"))


def feed_forward(x: Tensor, p: FeedForwardParams) -> Tensor:
    return linear(T.gelu(linear(x, p.lin1)), p.lin2)


class EncoderLayerParams:
    """Pre-norm transformer layer: LN -> attention -> add, LN -> FFN -> add."""

    def __init__(self, rng: np.random.Generator, dim: int, n_heads: int, ffn_hidden: int):
        self.ln1 = LayerNormParams(dim)
        self.attn = AttentionParams(rng, dim, n_heads)
        self.ln2 = LayerNormParams(dim)
        self.ffn = FeedForwardParams(rng, dim, ffn_hidden)

    def named_params(self, prefix: str):
        return (self.ln1.named_params(f"{prefix}.ln1")
                + self.attn.named_params(f"{prefix}.attn")
                + self.ln2.named_params(f"{prefix}.ln2")
                + self.ffn.named_params(f"{prefix}.ffn"))


def encoder_layer(x: Tensor, p: EncoderLayerParams) -> tuple[Tensor, Tensor]:
    attended, attn = self_attention(layer_norm(x, p.ln1), p.attn)
    x = x + attended
    x = x + feed_forward(layer_norm(x, p.ln2), p.ffn)
    return x, attn


class EncoderStackParams:
    """A stack of identical pre-norm transformer layers."""

    def __init__(self, rng: np.random.Generator, n_layers: int, dim: int,
                 n_heads: int, ffn_hidden: int):
        if n_layers <= 0:
            raise ConfigError(f"encoder stack needs at least one layer, got {n_layers}")
        self.layers = [EncoderLayerParams(rng, dim, n_heads, ffn_hidden)
                       for _ in range(n_layers)]

    def named_params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}.layer{i}"))
        return out


def encoder_stack(x: Tensor, p: EncoderStackParams) -> tuple[Tensor, list[Tensor]]:
    attns = []
    for layer in p.layers:
        x, attn = encoder_layer(x, layer)
        attns.append(attn)
    return x, attns


class MLPParams:
    """Plain MLP over the last axis with GELU between consecutive layers."""

    def __init__(self, rng: np.random.Generator, dims: list[int]):
        if len(dims) < 2:
            raise ConfigError("MLP needs at least an input and an output dim")
        self.layers = [LinearParams(rng, dims[i], dims[i + 1])
                       for i in range(len(dims) - 1)]

    def named_params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_params(f"{prefix}.layer{i}"))
        return out


def mlp(x: Tensor, p: MLPParams) -> Tensor:
    for i, layer in enumerate(p.layers):
        x = linear(x, layer)
        if i < len(p.layers) - 1:
            x = T.gelu(x)
    return x


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits``.

    ``logits`` is (batch, classes); ``labels`` is (batch,) of class ids.
    """
    labels = np.asarray(labels)
    if not np.issubdtype(labels.dtype, np.integer):
        raise DataError("cross_entropy labels must be integers")
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError(
            f"cross_entropy expects logits (B, C) and labels (B,), "
            f"got {logits.shape} and {labels.shape}")
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError(f"cross_entropy label out of range for {logits.shape[1]} classes")
    logp = T.log_softmax(logits, axis=-1)
    picked = T.gather(logp, labels[:, None], axis=1)
    return -T.mean(picked)
