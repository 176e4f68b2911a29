"""Full model assembly: variants, forward pass, and checkpoints.

The full architecture is tokenize -> cross-modal transformer -> token-wise
mixture of experts -> importance pooling -> classifier. Ablation variants
drop the transformer, the expert mixture, or the learned pooling (falling
back to a plain token mean), and a flattened-MLP baseline skips tokenization
entirely. Checkpoints are a self-describing binary container that round-trips
parameters bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Schema
from .encoders import build_encoders, tokenize
from .errors import ConfigError, DataError
from .moe import MoEParams, moe_forward
from .nn import EncoderStackParams, MLPParams, encoder_stack, mlp
from .pooling import (ClassifierParams, ImportanceParams, avg_pool, classify,
                      importance_pool, probability)
from .tensor import Tensor

VARIANTS = ("full", "token_avg", "token_moe_tim", "token_trans_tim",
            "token_trans_avg", "flat_mlp")


def uses_cross(variant: str) -> bool:
    return variant in ("full", "token_trans_tim", "token_trans_avg")


def uses_moe(variant: str) -> bool:
    return variant in ("full", "token_moe_tim", "token_trans_avg")


def uses_importance(variant: str) -> bool:
    return variant in ("full", "token_moe_tim", "token_trans_tim")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters plus the construction seed."""

    variant: str = "full"
    dim: int = 128
    cross_layers: int = 3
    cross_heads: int = 1
    n_experts: int = 4
    tau_e: float = 1.0
    tau_p: float = 1.0
    intra_layers: int = 1
    intra_heads: int = 1
    seed: int = 0

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; "
                              f"choose from {', '.join(VARIANTS)}")
        if self.dim <= 0:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.cross_layers < 0:
            raise ConfigError(f"cross_layers must be >= 0, got {self.cross_layers}")
        if self.n_experts < 1:
            raise ConfigError(f"n_experts must be >= 1, got {self.n_experts}")
        if not (self.tau_e > 0.0 and self.tau_p > 0.0):
            raise ConfigError("temperatures must be positive")
        for heads, label in ((self.cross_heads, "cross_heads"),
                             (self.intra_heads, "intra_heads")):
            if heads <= 0 or self.dim % heads != 0:
                raise ConfigError(f"{label}={heads} must be positive and divide "
                                  f"dim={self.dim}")
        if self.intra_layers < 1:
            raise ConfigError(f"intra_layers must be >= 1, got {self.intra_layers}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        cfg = cls(**d)
        cfg.validate()
        return cfg


class ModelParams:
    """All parameter groups of one model instance, keyed for checkpoints.

    Per-measure encoder groups are keyed by measure name, so a permuted
    schema binds to the same weights.
    """

    def __init__(self, config: ModelConfig, schema: Schema):
        config.validate()
        self.config = config
        self.schema = schema
        self.encoders = None
        self.cross = None
        self.moe = None
        self.importance = None
        self.classifier = None
        self.flat = None

        rng = np.random.default_rng(config.seed)
        v = config.variant
        if v == "flat_mlp":
            in_dim = sum(m.length for m in schema.measures)
            widths = np.geomspace(in_dim, 2, num=6)
            dims = [in_dim] + [max(2, int(round(w))) for w in widths[1:-1]] + [2]
            self.flat = MLPParams(rng, dims)
            return
        self.encoders = build_encoders(rng, schema, config.dim,
                                       config.intra_layers, config.intra_heads)
        if uses_cross(v) and config.cross_layers > 0:
            self.cross = EncoderStackParams(rng, config.cross_layers, config.dim,
                                            config.cross_heads, 4 * config.dim)
        if uses_moe(v):
            self.moe = MoEParams(rng, config.dim, config.n_experts, config.tau_e)
        if uses_importance(v):
            self.importance = ImportanceParams(config.dim, config.tau_p)
        self.classifier = ClassifierParams(rng, config.dim)

    def named_params(self) -> list[tuple[str, Tensor]]:
        out: list[tuple[str, Tensor]] = []
        if self.flat is not None:
            out.extend(self.flat.named_params("flat"))
            return out
        for name, enc in self.encoders.items():
            out.extend(enc.named_params(f"enc.{name}"))
        if self.cross is not None:
            out.extend(self.cross.named_params("cross"))
        if self.moe is not None:
            out.extend(self.moe.named_params("moe"))
        if self.importance is not None:
            out.extend(self.importance.named_params("importance"))
        if self.classifier is not None:
            out.extend(self.classifier.named_params("classifier"))
        return out

    def n_params(self) -> int:
        return sum(t.size for _, t in self.named_params())


def build_model(config: ModelConfig, schema: Schema) -> ModelParams:
    """Deterministic construction: same (config, schema) -> identical bits."""
    return ModelParams(config, schema)


@dataclass
class ForwardTrace:
    """Intermediate results of one batched forward pass.

    Stage tensors a variant skips are None. ``pi`` rows sum to 1 for both
    pooling heads (the mean head reports the constant uniform row).
    """

    logits: Tensor
    prob: np.ndarray
    token_names: list[str] = field(default_factory=list)
    z0: Tensor | None = None
    zl: Tensor | None = None
    u: Tensor | None = None
    pi: Tensor | None = None
    pooled: Tensor | None = None
    alpha: Tensor | None = None


def _flat_input(values: dict, schema: Schema) -> Tensor:
    cols = []
    for m in schema.measures:
        x = np.asarray(values[m.name], dtype=np.float64)
        cols.append(x if m.kind == "vector" else x[:, None])
    return T.as_tensor(np.concatenate(cols, axis=1))


def forward(params: ModelParams, values: dict, schema: Schema | None = None) -> ForwardTrace:
    """Run one batch through the variant's graph.

    ``values`` maps measure name to batch arrays (see data.stack_values).
    ``schema`` defaults to the build schema; passing a reordered copy of it
    rebinds the same per-measure weights in the new token order.
    """
    schema = params.schema if schema is None else schema
    v = params.config.variant

    if v == "flat_mlp":
        logits = mlp(_flat_input(values, schema), params.flat)
        return ForwardTrace(logits=logits, prob=probability(logits),
                            token_names=schema.names)

    z0, names = tokenize(values, params.encoders, schema)
    zl = None
    x = z0
    if params.cross is not None:
        x, _ = encoder_stack(x, params.cross)
        zl = x
    alpha = None
    u = x
    if params.moe is not None:
        u, alpha = moe_forward(u, params.moe)
    if params.importance is not None:
        pooled, pi = importance_pool(u, params.importance)
    else:
        pooled, pi = avg_pool(u)
    logits = classify(pooled, params.classifier)
    return ForwardTrace(logits=logits, prob=probability(logits), token_names=names,
                        z0=z0, zl=zl, u=u, pi=pi, pooled=pooled, alpha=alpha)


# ---------------------------------------------------------------------------
# checkpoint container

_MAGIC = b"TMCK1\n"


def save_checkpoint(path: str | Path, params: ModelParams, meta: dict | None = None) -> None:
    """Write magic, JSON header, then raw little-endian float64 buffers.

    The header carries config, schema, schema fingerprint, metadata, and the
    name/shape/offset table of every parameter, so a load needs nothing else.
    """
    entries = []
    buffers = []
    offset = 0
    for name, t in params.named_params():
        buf = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(t.shape), "offset": offset,
                        "bytes": len(buf)})
        buffers.append(buf)
        offset += len(buf)
    header = {
        "config": params.config.to_dict(),
        "schema": params.schema.to_dict(),
        "fingerprint": params.schema.fingerprint(),
        "meta": meta or {},
        "params": entries,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    """Rebuild a model from a checkpoint; parameter bits restore exactly."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise DataError(f"{path} is not a model checkpoint (bad magic)")
    pos = len(_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint header") from exc
    base = pos + hlen

    config = ModelConfig.from_dict(header["config"])
    schema = Schema.from_dict(header["schema"])
    if schema.fingerprint() != header["fingerprint"]:
        raise DataError(f"{path}: schema fingerprint mismatch inside checkpoint")
    params = build_model(config, schema)
    stored = {e["name"]: e for e in header["params"]}
    for name, t in params.named_params():
        e = stored.pop(name, None)
        if e is None:
            raise DataError(f"{path}: checkpoint lacks parameter {name}")
        if tuple(e["shape"]) != t.shape:
            raise DataError(f"{path}: parameter {name} has shape {tuple(e['shape'])}, "
                            f"model expects {t.shape}")
        start = base + e["offset"]
        buf = raw[start : start + e["bytes"]]
        if len(buf) != e["bytes"]:
            raise DataError(f"{path}: checkpoint truncated at parameter {name}")
        t.data = np.frombuffer(buf, dtype="<f8").reshape(t.shape).astype(np.float64)
    if stored:
        raise DataError(f"{path}: checkpoint has unknown parameters "
                        f"{sorted(stored)[:3]}...")
    return params, header["meta"]
