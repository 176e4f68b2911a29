"""Classification metrics, sex-stratified evaluation, and report files.

Positive class is label 1. The decision threshold is fixed at 0.5 with ties
predicted positive. Metrics with a zero denominator are reported as the
explicit string "undefined" in every output, never silently coerced to 0.
Report files are flat, plot-ready tables; figure rendering lives in the CLI
layer.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Schema, SubjectRecord, labels_of, stack_values
from .errors import ConfigError, DataError
from .model import ModelParams, forward
from .moe import expert_load

log = logging.getLogger("tokmoe.metrics")

THRESHOLD = 0.5
SEX_GROUPS = ("female", "male")


@dataclass(frozen=True)
class ConfusionCounts:
    """Binary confusion counts with label 1 as the positive class."""

    tp: int
    fn: int
    tn: int
    fp: int

    def __post_init__(self):
        if min(self.tp, self.fn, self.tn, self.fp) < 0:
            raise ConfigError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp

    @classmethod
    def from_predictions(cls, labels: np.ndarray, preds: np.ndarray) -> "ConfusionCounts":
        labels = np.asarray(labels).astype(bool)
        preds = np.asarray(preds).astype(bool)
        return cls(tp=int(np.sum(labels & preds)),
                   fn=int(np.sum(labels & ~preds)),
                   tn=int(np.sum(~labels & ~preds)),
                   fp=int(np.sum(~labels & preds)))

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fn": self.fn, "tn": self.tn, "fp": self.fp}


@dataclass(frozen=True)
class MetricRow:
    """Accuracy / sensitivity / specificity / F1 for one subject group.

    A metric whose denominator is zero is None (serialized as "undefined").
    """

    group: str
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    f1: float | None

    def to_dict(self) -> dict:
        def enc(v):
            return "undefined" if v is None else v

        return {"accuracy": enc(self.accuracy), "sensitivity": enc(self.sensitivity),
                "specificity": enc(self.specificity), "f1": enc(self.f1)}


def compute_metrics(counts: ConfusionCounts, group: str = "overall") -> MetricRow:
    """Standard binary metrics from confusion counts."""
    n = counts.total
    if n == 0:
        raise DataError("cannot compute metrics on zero subjects")
    pos = counts.tp + counts.fn
    neg = counts.tn + counts.fp
    f1_den = 2 * counts.tp + counts.fp + counts.fn
    return MetricRow(
        group=group,
        accuracy=(counts.tp + counts.tn) / n,
        sensitivity=counts.tp / pos if pos > 0 else None,
        specificity=counts.tn / neg if neg > 0 else None,
        f1=2 * counts.tp / f1_den if f1_den > 0 else None,
    )


@dataclass
class EvalResult:
    """Everything one evaluation produces, ready for serialization."""

    rows: dict
    counts: dict
    sids: list[str]
    sexes: list[str]
    labels: np.ndarray
    probs: np.ndarray
    preds: np.ndarray
    token_names: list[str]
    pi: np.ndarray | None
    gate_load: np.ndarray | None


def evaluate(params: ModelParams, records: list[SubjectRecord],
             schema: Schema | None = None, batch_size: int = 64) -> EvalResult:
    """Forward all records, threshold at 0.5, stratify metrics by sex.

    An empty sex stratum is omitted from the rows with a logged notice.
    """
    if not records:
        raise DataError("cannot evaluate an empty dataset")
    schema = params.schema if schema is None else schema
    probs = []
    pis = []
    alphas = []
    token_names: list[str] = []
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        trace = forward(params, stack_values(batch, schema), schema)
        probs.append(trace.prob)
        token_names = trace.token_names
        if trace.pi is not None:
            pis.append(trace.pi.data)
        if trace.alpha is not None:
            alphas.append(trace.alpha.data)
    probs = np.concatenate(probs)
    preds = probs >= THRESHOLD
    labels = labels_of(records)
    sexes = [r.sex for r in records]

    counts = {"overall": ConfusionCounts.from_predictions(labels, preds)}
    rows = {"overall": compute_metrics(counts["overall"], "overall")}
    for g in SEX_GROUPS:
        mask = np.array([s == g for s in sexes])
        if not mask.any():
            log.info("no %s subjects in evaluation set; stratum omitted", g)
            continue
        counts[g] = ConfusionCounts.from_predictions(labels[mask], preds[mask])
        rows[g] = compute_metrics(counts[g], g)

    return EvalResult(
        rows=rows, counts=counts,
        sids=[r.sid for r in records], sexes=sexes, labels=labels,
        probs=probs, preds=preds, token_names=token_names,
        pi=np.concatenate(pis) if pis else None,
        gate_load=expert_load(np.concatenate(alphas)) if alphas else None,
    )


# ---------------------------------------------------------------------------
# importance aggregation

def importance_means(result: EvalResult) -> dict:
    """Mean token importance per group ('all' plus non-empty sex strata)."""
    if result.pi is None:
        return {}
    out = {"all": result.pi.mean(axis=0)}
    for g in SEX_GROUPS:
        mask = np.array([s == g for s in result.sexes])
        if mask.any():
            out[g] = result.pi[mask].mean(axis=0)
    return out


def female_minus_male(means: dict) -> np.ndarray | None:
    if "female" in means and "male" in means:
        return means["female"] - means["male"]
    return None


# ---------------------------------------------------------------------------
# report files

def _fmt(v: float) -> str:
    return repr(float(v))


def write_metrics_json(path: str | Path, result: EvalResult, meta: dict | None = None) -> None:
    groups = {}
    for g, row in result.rows.items():
        entry = row.to_dict()
        entry["counts"] = result.counts[g].to_dict()
        groups[g] = entry
    doc = {
        "n_subjects": len(result.sids),
        "threshold": THRESHOLD,
        "groups": groups,
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_importance_csv(path: str | Path, result: EvalResult) -> None:
    """One row per token per group: token, group, mean_pi, baseline, female_minus_male.

    The sex difference is a per-token quantity; it repeats on each of the
    token's rows and is empty when either stratum is absent.
    """
    means = importance_means(result)
    t = len(result.token_names)
    baseline = 1.0 / t if t else 0.0
    diff = female_minus_male(means)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["token", "group", "mean_pi", "baseline", "female_minus_male"])
        for i, tok in enumerate(result.token_names):
            for g, mu in means.items():
                writer.writerow([tok, g, _fmt(mu[i]), _fmt(baseline),
                                 "" if diff is None else _fmt(diff[i])])


def write_expert_load_csv(path: str | Path, result: EvalResult) -> None:
    """Mean gate mass per token and expert; header-only if no gate is present."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["token", "expert", "mean_gate"])
        if result.gate_load is None:
            return
        for i, tok in enumerate(result.token_names):
            for e in range(result.gate_load.shape[1]):
                writer.writerow([tok, str(e), _fmt(result.gate_load[i, e])])


def write_predictions_csv(path: str | Path, result: EvalResult) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "sex", "label", "prob", "pred"])
        for i, sid in enumerate(result.sids):
            writer.writerow([sid, result.sexes[i], str(int(result.labels[i])),
                             _fmt(result.probs[i]), str(int(result.preds[i]))])
