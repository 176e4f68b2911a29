"""Measure schemas, subject records, normalization, splitting, synthesis.

A schema declares the ordered list of measures (vector or scalar, with a
per-measure normalization rule and a modality group tag). A dataset is a CSV
of subjects whose columns flatten the measures in schema order; empty fields
are missing values. The synthetic generator plants label signals with known
effect sizes, including sex-conditioned ones, so the Bayes-optimal accuracy
of a generated dataset is computable by Monte Carlo.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, SchemaError

log = logging.getLogger("tokmoe.data")

VALID_KINDS = ("vector", "scalar")
VALID_RULES = ("zscore", "unit_rescale", "range_01", "none")
VALID_SEX = ("female", "male", "unknown")


@dataclass(frozen=True)
class Measure:
    """One schema entry: a named vector or scalar input with its rule."""

    name: str
    kind: str
    length: int
    rule: str
    group: str = "NONE"
    factors: tuple[float, ...] | None = None
    lo: float | None = None
    hi: float | None = None

    def validate(self) -> None:
        if self.kind not in VALID_KINDS:
            raise SchemaError(f"measure {self.name!r}: unknown kind {self.kind!r}")
        if self.rule not in VALID_RULES:
            raise SchemaError(f"measure {self.name!r}: unknown rule {self.rule!r}")
        if self.kind == "scalar" and self.length != 1:
            raise SchemaError(f"measure {self.name!r}: scalar length must be 1")
        if self.kind == "vector" and self.length < 1:
            raise SchemaError(f"measure {self.name!r}: vector length must be >= 1")
        if self.rule == "zscore" and self.kind != "vector":
            raise SchemaError(
                f"measure {self.name!r}: zscore normalizes across elements and "
                f"needs a vector measure")
        if self.rule == "unit_rescale":
            if self.factors is None or len(self.factors) not in (1, self.length):
                raise SchemaError(
                    f"measure {self.name!r}: unit_rescale needs 1 or {self.length} factors")
        if self.rule == "range_01":
            if self.lo is None or self.hi is None or not self.hi > self.lo:
                raise SchemaError(
                    f"measure {self.name!r}: range_01 needs min < max bounds")

    def to_dict(self) -> dict:
        d: dict = {"name": self.name, "kind": self.kind, "rule": self.rule,
                   "group": self.group}
        if self.kind == "vector":
            d["length"] = self.length
        if self.factors is not None:
            d["factors"] = list(self.factors)
        if self.lo is not None:
            d["min"] = self.lo
        if self.hi is not None:
            d["max"] = self.hi
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Measure":
        try:
            kind = d["kind"]
            m = cls(
                name=d["name"],
                kind=kind,
                length=int(d.get("length", 1)) if kind == "vector" else 1,
                rule=d.get("rule", "none"),
                group=d.get("group", "NONE"),
                factors=tuple(float(f) for f in d["factors"]) if "factors" in d else None,
                lo=float(d["min"]) if "min" in d else None,
                hi=float(d["max"]) if "max" in d else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"malformed measure entry: {d!r}") from exc
        m.validate()
        return m


@dataclass(frozen=True)
class Schema:
    """Ordered measure declarations; token count T = number of measures."""

    name: str
    measures: tuple[Measure, ...]

    def __post_init__(self):
        names = [m.name for m in self.measures]
        if len(set(names)) != len(names):
            raise SchemaError(f"schema {self.name!r} has duplicate measure names")
        if not self.measures:
            raise SchemaError(f"schema {self.name!r} declares no measures")

    @property
    def token_count(self) -> int:
        return len(self.measures)

    @property
    def names(self) -> list[str]:
        return [m.name for m in self.measures]

    def measure(self, name: str) -> Measure:
        for m in self.measures:
            if m.name == name:
                return m
        raise SchemaError(f"schema {self.name!r} has no measure {name!r}")

    def columns(self) -> list[str]:
        """Flattened CSV column names in schema order."""
        cols = []
        for m in self.measures:
            if m.kind == "vector":
                cols.extend(f"{m.name}_{i}" for i in range(m.length))
            else:
                cols.append(m.name)
        return cols

    def to_dict(self) -> dict:
        return {"name": self.name, "measures": [m.to_dict() for m in self.measures]}

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def fingerprint(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "Schema":
        try:
            name = d.get("name", "unnamed")
            entries = d["measures"]
        except (KeyError, TypeError) as exc:
            raise SchemaError("schema file needs a 'measures' list") from exc
        return cls(name=name, measures=tuple(Measure.from_dict(e) for e in entries))

    def subset(self, groups: list[str]) -> "Schema":
        """Keep only measures whose group tag is in ``groups``; order preserved."""
        kept = tuple(m for m in self.measures if m.group in groups)
        if not kept:
            raise SchemaError(
                f"no measure in schema {self.name!r} matches groups {groups}")
        tag = "+".join(sorted(groups))
        return Schema(name=f"{self.name}[{tag}]", measures=kept)


def load_schema(ref: str | Path) -> Schema:
    """Load a schema from a JSON file path or a built-in schema name."""
    p = Path(ref)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise DataError(f"schema file not found: {p}")
        text = p.read_text()
    else:
        res = resources.files("tokmoe").joinpath(f"schemas/{ref}.json")
        if not res.is_file():
            raise DataError(f"unknown schema {ref!r} (not a file, not built in)")
        text = res.read_text()
    try:
        return Schema.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"schema {ref}: invalid JSON: {exc}") from exc


@dataclass
class SubjectRecord:
    """One subject: id, sex, binary label, and raw per-measure values.

    Vector values are float arrays with NaN marking missing elements;
    scalar values are floats (NaN when missing).
    """

    sid: str
    sex: str
    label: int
    values: dict = field(default_factory=dict)

    def validate(self, schema: Schema) -> None:
        if self.sex not in VALID_SEX:
            raise DataError(f"subject {self.sid}: invalid sex {self.sex!r}")
        if self.label not in (0, 1):
            raise DataError(f"subject {self.sid}: label must be 0 or 1")
        for m in schema.measures:
            if m.name not in self.values:
                raise SchemaError(f"subject {self.sid}: missing measure {m.name!r}")


def _zscore(x: np.ndarray, name: str, sid: str) -> np.ndarray:
    present = np.isfinite(x)
    n = int(present.sum())
    if n < 2:
        log.warning("measure %s of subject %s: %d present element(s), zero-filled",
                    name, sid, n)
        return np.zeros_like(x)
    vals = x[present]
    mu = vals.mean()
    sd = vals.std()
    if sd == 0.0:
        log.warning("measure %s of subject %s: zero variance, zero-filled", name, sid)
        return np.zeros_like(x)
    out = np.zeros_like(x)
    out[present] = (vals - mu) / sd
    return out


def normalize_record(record: SubjectRecord, schema: Schema) -> SubjectRecord:
    """Apply each measure's rule, then impute remaining missing values as 0.

    Z-scoring is within subject across the measure's own present elements,
    with the population (divide-by-n) standard deviation.
    """
    out: dict = {}
    for m in schema.measures:
        x = np.asarray(record.values[m.name], dtype=np.float64)
        if m.kind == "vector" and x.shape != (m.length,):
            raise SchemaError(
                f"subject {record.sid}: measure {m.name!r} has shape {x.shape}, "
                f"schema says ({m.length},)")
        if m.kind == "scalar" and x.shape not in ((), (1,)):
            raise SchemaError(
                f"subject {record.sid}: measure {m.name!r} must be scalar")
        x = x.reshape(m.length)
        if m.rule == "zscore":
            y = _zscore(x, m.name, record.sid)
        elif m.rule == "unit_rescale":
            y = x * np.asarray(m.factors, dtype=np.float64)
        elif m.rule == "range_01":
            y = (x - m.lo) / (m.hi - m.lo)
        else:
            y = x.copy()
        y[~np.isfinite(y)] = 0.0
        out[m.name] = y if m.kind == "vector" else float(y[0])
    return SubjectRecord(sid=record.sid, sex=record.sex, label=record.label, values=out)


def normalize_dataset(records: list[SubjectRecord], schema: Schema) -> list[SubjectRecord]:
    return [normalize_record(r, schema) for r in records]


# ---------------------------------------------------------------------------
# CSV round trip

def save_dataset(path: str | Path, records: list[SubjectRecord], schema: Schema) -> None:
    """Write subjects as CSV: id, sex, label, then flattened measure columns.

    Missing values become empty fields; floats use shortest round-trip form.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "sex", "label"] + schema.columns())
        for r in sorted(records, key=lambda r: r.sid):
            row: list[str] = [r.sid, r.sex, str(r.label)]
            for m in schema.measures:
                vals = np.atleast_1d(np.asarray(r.values[m.name], dtype=np.float64))
                row.extend("" if not math.isfinite(v) else repr(float(v)) for v in vals)
            writer.writerow(row)


def load_dataset(path: str | Path, schema: Schema) -> list[SubjectRecord]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"subjects file not found: {path}")
    expected = ["id", "sex", "label"] + schema.columns()
    records: list[SubjectRecord] = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise SchemaError(
                f"subjects file {path} header does not match schema "
                f"{schema.name!r} (expected {len(expected)} columns, "
                f"got {0 if header is None else len(header)})")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DataError(f"{path} line {lineno}: expected {len(expected)} "
                                f"fields, got {len(row)}")
            sid, sex, label_s = row[0], row[1], row[2]
            if sex not in VALID_SEX:
                raise DataError(f"{path} line {lineno}: invalid sex {sex!r}")
            if label_s not in ("0", "1"):
                raise DataError(f"{path} line {lineno}: label must be 0 or 1, "
                                f"got {label_s!r}")
            fields = row[3:]
            values: dict = {}
            i = 0
            for m in schema.measures:
                chunk = fields[i : i + m.length]
                i += m.length
                try:
                    arr = np.array([float(f) if f != "" else np.nan for f in chunk])
                except ValueError as exc:
                    raise DataError(
                        f"{path} line {lineno}: bad value in measure {m.name!r}") from exc
                values[m.name] = arr if m.kind == "vector" else float(arr[0])
            rec = SubjectRecord(sid=sid, sex=sex, label=int(label_s), values=values)
            records.append(rec)
    if not records:
        raise DataError(f"subjects file {path} has no rows")
    return records


def stack_values(records: list[SubjectRecord], schema: Schema) -> dict:
    """Stack per-record values into batch arrays keyed by measure name."""
    out: dict = {}
    for m in schema.measures:
        if m.kind == "vector":
            out[m.name] = np.stack([np.asarray(r.values[m.name], dtype=np.float64)
                                    for r in records])
        else:
            out[m.name] = np.array([float(r.values[m.name]) for r in records])
    return out


def labels_of(records: list[SubjectRecord]) -> np.ndarray:
    return np.array([r.label for r in records], dtype=np.int64)


# ---------------------------------------------------------------------------
# splitting

def split_dataset(records: list[SubjectRecord], train_fraction: float, seed: int,
                  stratify: bool = True) -> tuple[list[SubjectRecord], list[SubjectRecord]]:
    """Seeded subject-level partition with ``floor(fraction * n)`` train rows.

    With stratification, per-label train counts are apportioned by largest
    remainder so the total still equals floor(fraction * n) exactly and each
    label's ratio is preserved within one subject.
    """
    n = len(records)
    if n < 2:
        raise DataError(f"need at least 2 subjects to split, got {n}")
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train fraction must be in (0,1), got {train_fraction}")
    ordered = sorted(records, key=lambda r: r.sid)
    rng = np.random.default_rng(seed)
    n_train = int(math.floor(train_fraction * n))

    if not stratify:
        perm = rng.permutation(n)
        train = [ordered[i] for i in perm[:n_train]]
        test = [ordered[i] for i in perm[n_train:]]
    else:
        classes: dict[int, list[SubjectRecord]] = {0: [], 1: []}
        for r in ordered:
            classes[r.label].append(r)
        present = [c for c in (0, 1) if classes[c]]
        quotas = {c: train_fraction * len(classes[c]) for c in present}
        base = {c: int(math.floor(quotas[c])) for c in present}
        leftover = n_train - sum(base.values())
        by_remainder = sorted(present, key=lambda c: (quotas[c] - base[c], c),
                              reverse=True)
        for c in by_remainder[:leftover]:
            base[c] += 1
        train, test = [], []
        for c in present:
            members = classes[c]
            perm = rng.permutation(len(members))
            k = min(base[c], len(members))
            train.extend(members[i] for i in perm[:k])
            test.extend(members[i] for i in perm[k:])
    train.sort(key=lambda r: r.sid)
    test.sort(key=lambda r: r.sid)
    return train, test


# ---------------------------------------------------------------------------
# synthetic generation

@dataclass(frozen=True)
class Effect:
    """One planted main effect: a unit-variance summary of a measure times
    a coefficient, optionally active for one sex only."""

    measure: str
    size: float
    mode: str = "contrast"
    sex: str = "any"

    def validate(self, schema: Schema) -> None:
        m = schema.measure(self.measure)
        if self.mode not in ("contrast", "level"):
            raise ConfigError(f"effect on {self.measure!r}: unknown mode {self.mode!r}")
        if self.mode == "contrast" and m.kind == "vector" and m.length < 2:
            raise ConfigError(f"effect on {self.measure!r}: contrast needs >= 2 elements")
        if self.sex not in ("any", "female", "male"):
            raise ConfigError(f"effect on {self.measure!r}: bad sex gate {self.sex!r}")


@dataclass(frozen=True)
class Interaction:
    """A planted product term between two measure summaries."""

    a: Effect
    b: Effect
    size: float


@dataclass(frozen=True)
class SignalSpec:
    """Generative recipe: schema reference, subject count, planted signals."""

    schema_ref: str
    n_subjects: int
    base_logit: float
    effects: tuple[Effect, ...]
    interactions: tuple[Interaction, ...]
    female_fraction: float = 0.5

    @classmethod
    def from_dict(cls, d: dict) -> "SignalSpec":
        try:
            effects = tuple(
                Effect(measure=e["measure"], size=float(e["size"]),
                       mode=e.get("mode", "contrast"), sex=e.get("sex", "any"))
                for e in d.get("effects", []))
            inters = tuple(
                Interaction(
                    a=Effect(measure=i["a"]["measure"], size=1.0,
                             mode=i["a"].get("mode", "contrast"),
                             sex=i["a"].get("sex", "any")),
                    b=Effect(measure=i["b"]["measure"], size=1.0,
                             mode=i["b"].get("mode", "contrast"),
                             sex=i["b"].get("sex", "any")),
                    size=float(i["size"]))
                for i in d.get("interactions", []))
            return cls(
                schema_ref=d["schema"],
                n_subjects=int(d["n_subjects"]),
                base_logit=float(d.get("base_logit", 0.0)),
                effects=effects,
                interactions=inters,
                female_fraction=float(d.get("female_fraction", 0.5)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed synthetic spec: {exc}") from exc

    def validate(self, schema: Schema) -> None:
        if self.n_subjects < 2:
            raise ConfigError(f"n_subjects must be >= 2, got {self.n_subjects}")
        if not 0.0 <= self.female_fraction <= 1.0:
            raise ConfigError("female_fraction must be in [0,1]")
        for e in self.effects:
            e.validate(schema)
        for i in self.interactions:
            i.a.validate(schema)
            i.b.validate(schema)


def load_signal_spec(ref: str | Path) -> SignalSpec:
    """Load a synthetic spec from a JSON file path or a built-in spec name."""
    p = Path(ref)
    if p.suffix == ".json" or p.exists():
        if not p.exists():
            raise DataError(f"synthetic spec file not found: {p}")
        text = p.read_text()
    else:
        res = resources.files("tokmoe").joinpath(f"specs/{ref}.json")
        if not res.is_file():
            raise DataError(f"unknown synthetic spec {ref!r} (not a file, not built in)")
        text = res.read_text()
    try:
        return SignalSpec.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"synthetic spec {ref}: invalid JSON: {exc}") from exc


def _summary(effect: Effect, values: dict, schema: Schema) -> float:
    """Unit-variance scalar summary of a measure for signal construction."""
    m = schema.measure(effect.measure)
    if m.kind == "scalar":
        return float(values[effect.measure])
    x = np.asarray(values[effect.measure])
    if effect.mode == "contrast":
        return float((x[0] - x[1]) / math.sqrt(2.0))
    return float(x.mean() * math.sqrt(m.length))


def _sex_gate(sex_tag: str, sex: str) -> float:
    return 1.0 if sex_tag == "any" or sex_tag == sex else 0.0


def _subject_logit(values: dict, sex: str, spec: SignalSpec, schema: Schema) -> float:
    logit = spec.base_logit
    for e in spec.effects:
        logit += e.size * _sex_gate(e.sex, sex) * _summary(e, values, schema)
    for ia in spec.interactions:
        ga = _sex_gate(ia.a.sex, sex) * _summary(ia.a, values, schema)
        gb = _sex_gate(ia.b.sex, sex) * _summary(ia.b, values, schema)
        logit += ia.size * ga * gb
    return logit


def _draw_features(rng: np.random.Generator, schema: Schema,
                   spec: SignalSpec) -> tuple[str, dict]:
    sex = "female" if rng.random() < spec.female_fraction else "male"
    values: dict = {}
    for m in schema.measures:
        if m.name == "sex" and m.kind == "scalar":
            values[m.name] = 1.0 if sex == "female" else 0.0
        elif m.kind == "vector":
            values[m.name] = rng.standard_normal(m.length)
        else:
            values[m.name] = float(rng.standard_normal())
    return sex, values


def _draw_subject(rng: np.random.Generator, schema: Schema,
                  spec: SignalSpec, sid: str) -> SubjectRecord:
    sex, values = _draw_features(rng, schema, spec)
    logit = _subject_logit(values, sex, spec, schema)
    p = 1.0 / (1.0 + math.exp(-logit))
    label = 1 if rng.random() < p else 0
    return SubjectRecord(sid=sid, sex=sex, label=label, values=values)


def generate_synthetic(schema: Schema, spec: SignalSpec, seed: int) -> list[SubjectRecord]:
    """Draw ``spec.n_subjects`` records under the planted generative law.

    All measure baselines are standard normal (the built-in synthetic schemas
    declare rule 'none', so generated values are already on model scale);
    the 'sex' scalar, when present, is the 1=female indicator. Labels are
    Bernoulli in the sigmoid of the planted logit.
    """
    spec.validate(schema)
    rng = np.random.default_rng(seed)
    width = len(str(spec.n_subjects - 1))
    return [_draw_subject(rng, schema, spec, f"S{i:0{width}d}")
            for i in range(spec.n_subjects)]


def bayes_rate(schema: Schema, spec: SignalSpec, seed: int = 0,
               n_mc: int = 20000) -> float:
    """Monte-Carlo estimate of the Bayes-optimal accuracy of the generator.

    The optimal rule predicts the likelier label given the features, so the
    attainable accuracy is E[max(p, 1-p)] over the feature distribution.
    """
    spec.validate(schema)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(n_mc):
        sex, values = _draw_features(rng, schema, spec)
        logit = _subject_logit(values, sex, spec, schema)
        p = 1.0 / (1.0 + math.exp(-logit))
        total += max(p, 1.0 - p)
    return total / n_mc
