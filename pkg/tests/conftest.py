"""Shared fixtures: tiny schemas, configs, and record batches."""

import re

import numpy as np
import pytest

from tokmoe.data import Measure, Schema, SubjectRecord


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "acceptance: end-to-end acceptance criteria")


def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion, when any of them ran."""
    rows = []
    for status in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(status, []):
            m = re.search(r"test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m:
                verdict = "PASS" if status == "passed" else "FAIL"
                rows.append((int(m.group(1)), m.group(2), verdict))
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for num, name, verdict in sorted(rows):
        terminalreporter.write_line(
            f"criterion {num:2d} {name:<28s} {verdict}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_schema():
    """Four measures (3 vectors + 1 scalar), token count 4."""
    return Schema(name="tiny4", measures=(
        Measure(name="profile", kind="vector", length=5, rule="none", group="A"),
        Measure(name="tract", kind="vector", length=3, rule="none", group="A"),
        Measure(name="panel", kind="vector", length=2, rule="none", group="B"),
        Measure(name="age", kind="scalar", length=1, rule="none", group="C"),
    ))


def random_values(schema, batch, rng):
    """Batch value dict matching a schema, standard normal."""
    out = {}
    for m in schema.measures:
        if m.kind == "vector":
            out[m.name] = rng.standard_normal((batch, m.length))
        else:
            out[m.name] = rng.standard_normal(batch)
    return out


def random_records(schema, n, rng, sex_cycle=("female", "male")):
    """Labeled records with random features, alternating sexes."""
    records = []
    for i in range(n):
        values = {}
        for m in schema.measures:
            if m.kind == "vector":
                values[m.name] = rng.standard_normal(m.length)
            else:
                values[m.name] = float(rng.standard_normal())
        records.append(SubjectRecord(
            sid=f"T{i:04d}", sex=sex_cycle[i % len(sex_cycle)],
            label=int(rng.integers(0, 2)), values=values))
    return records
