from __future__ import annotations

import csv
from pathlib import Path

import numpy as np
import pytest

from pooledlogit.model import MicroRecord

FIXTURES = Path(__file__).parent / "fixtures"


def make_cohort(n: int, seed: int, prefix: str = "s") -> list[MicroRecord]:
    """Small logistic cohort with covariates x, z1 > 0 and z2."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=n)
    z1 = np.abs(0.3 * x + rng.normal(size=n)) + 0.05
    z2 = rng.normal(size=n)
    eta = -0.8 + 0.6 * x - 0.4 * np.log(z1) + 0.3 * z2 + 0.4 * x * z2
    y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(int)
    return [
        MicroRecord(f"{prefix}{i:04d}", int(y[i]), {"x": float(x[i]), "z1": float(z1[i]), "z2": float(z2[i])})
        for i in range(n)
    ]


def split(records, parts: int, seed: int) -> dict[str, list[MicroRecord]]:
    """Random partition of records over ``parts`` nodes, file order kept within each node."""
    owner = np.random.default_rng(seed).integers(parts, size=len(records))
    nodes = {f"node{k}": [] for k in range(parts)}
    for rec, k in zip(records, owner):
        nodes[f"node{k}"].append(rec)
    return nodes


@pytest.fixture(scope="session")
def glm12_rows():
    with open(FIXTURES / "glm12.csv", newline="") as fh:
        return [(int(r["outcome"]), float(r["x"])) for r in csv.DictReader(fh)]


@pytest.fixture(scope="session")
def glm12_records():
    with open(FIXTURES / "glm12.csv", newline="") as fh:
        return [MicroRecord(r["subject_id"], int(r["outcome"]), {"x": float(r["x"])}) for r in csv.DictReader(fh)]


@pytest.fixture(scope="session")
def cohort():
    return make_cohort(240, seed=2024)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
