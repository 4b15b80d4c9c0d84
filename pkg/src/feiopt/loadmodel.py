"""Per-round computational load of an edge server as a function of (b, e, n).

A round performs ``e * n / b`` minibatch steps.  Each step costs a fixed
overhead plus a per-sample term, giving

    load(b, e, n) = c0 * e * n / b + c1 * e * n        [seconds]

which is linear in ``n`` for fixed ``(b, e)``.  The coefficients are fitted
to measured (n, e, b, time per round) records.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import nnls


class FitError(ValueError):
    pass


class InfeasibleRequirementError(ValueError):
    """No measured configuration reaches the requested accuracy."""

    def __init__(self, message: str, best_accuracy: float | None):
        super().__init__(message)
        self.best_accuracy = best_accuracy


@dataclass(frozen=True)
class MeasurementRecord:
    n: int
    e: int
    b: int
    acc50: float
    acc200: float
    time_per_round: float

    def __post_init__(self):
        if not (self.n >= self.b >= 1 and self.e >= 1):
            raise ValueError(f"record needs n >= b >= 1 and e >= 1: {self}")
        if not (0 <= self.acc50 <= 1 and 0 <= self.acc200 <= 1):
            raise ValueError(f"accuracies must be fractions in [0, 1]: {self}")
        if not self.time_per_round > 0:
            raise ValueError(f"time_per_round must be > 0: {self}")

    def accuracy(self, rounds: int) -> float:
        if rounds == 50:
            return self.acc50
        if rounds == 200:
            return self.acc200
        raise ValueError(f"records carry accuracy at 50 and 200 rounds only (asked for {rounds})")


@dataclass(frozen=True)
class LoadCoefficients:
    c0: float
    c1: float
    dataset_type: str = "mnist"
    requirement: float | None = None
    max_rel_residual: float = float("nan")
    rms_residual: float = float("nan")

    def __post_init__(self):
        if self.c0 < 0 or self.c1 < 0 or (self.c0 == 0 and self.c1 == 0):
            raise ValueError(f"load coefficients must be >= 0 and not both zero (got {self.c0}, {self.c1})")


def load(b: float, e: float, n: float, coeffs: LoadCoefficients) -> float:
    """Seconds per training round for minibatch ``b``, ``e`` passes and ``n`` samples."""
    if b < 1 or e < 1 or n < 0:
        raise ValueError(f"need b >= 1, e >= 1, n >= 0 (got b={b}, e={e}, n={n})")
    return e * n * (coeffs.c0 / b + coeffs.c1)


def per_sample_load(b: float, e: float, coeffs: LoadCoefficients) -> float:
    """Slope of :func:`load` in ``n``: seconds per sample per round."""
    return e * (coeffs.c0 / b + coeffs.c1)


def _design(records: Sequence[MeasurementRecord]) -> tuple[np.ndarray, np.ndarray]:
    n = np.array([r.n for r in records], dtype=float)
    e = np.array([r.e for r in records], dtype=float)
    b = np.array([r.b for r in records], dtype=float)
    t = np.array([r.time_per_round for r in records], dtype=float)
    return np.column_stack([e * n / b, e * n]), t


def fit_coefficients(records: Sequence[MeasurementRecord], dataset_type: str = "mnist") -> LoadCoefficients:
    """Nonnegative least-squares fit of ``time ~ c0 * e*n/b + c1 * e*n``."""
    if len(records) < 2:
        raise FitError("need at least two records to fit two coefficients")
    x, t = _design(records)
    if np.linalg.matrix_rank(x) < 2:
        raise FitError("records are collinear in (e*n/b, e*n); coefficients not identifiable")
    coef, _ = nnls(x, t)
    pred = x @ coef
    rel = np.abs(pred - t) / t
    return LoadCoefficients(
        c0=float(coef[0]),
        c1=float(coef[1]),
        dataset_type=dataset_type,
        max_rel_residual=float(rel.max()),
        rms_residual=float(np.sqrt(np.mean((pred - t) ** 2))),
    )


def read_records(source: str | Path | io.TextIOBase) -> list[MeasurementRecord]:
    """Read records from a CSV with header ``n,e,b,acc50,acc200,time_per_round``."""
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_records(fh)
    reader = csv.DictReader(source)
    expected = ["n", "e", "b", "acc50", "acc200", "time_per_round"]
    if reader.fieldnames != expected:
        raise ValueError(f"measurement CSV header must be {','.join(expected)} (got {reader.fieldnames})")
    return [
        MeasurementRecord(
            n=int(row["n"]),
            e=int(row["e"]),
            b=int(row["b"]),
            acc50=float(row["acc50"]),
            acc200=float(row["acc200"]),
            time_per_round=float(row["time_per_round"]),
        )
        for row in reader
    ]


@lru_cache(maxsize=1)
def table1_records() -> tuple[MeasurementRecord, ...]:
    """The shipped FedAvg/MNIST timing table (16 rows)."""
    text = resources.files("feiopt.data").joinpath("table1.csv").read_text()
    return tuple(read_records(io.StringIO(text)))


@lru_cache(maxsize=1)
def default_coefficients() -> LoadCoefficients:
    return fit_coefficients(table1_records())


def _rows_at_size(n: float, records: Iterable[MeasurementRecord]) -> tuple[int, list[MeasurementRecord]]:
    records = list(records)
    sizes = sorted({r.n for r in records})
    below = [s for s in sizes if s <= n]
    if not below:
        raise InfeasibleRequirementError(
            f"dataset size {n} is below the smallest measured size {sizes[0] if sizes else None}", None
        )
    size = below[-1]
    return size, [r for r in records if r.n == size]


def select_params(
    n: float, records: Sequence[MeasurementRecord], requirement: float, round_budget: int = 200
) -> tuple[int, int]:
    """Cheapest ``(b, e)`` meeting ``requirement`` accuracy after ``round_budget`` rounds.

    ``n`` is rounded down to the nearest measured dataset size.  Among the
    qualifying rows the one with the smallest measured time per round wins;
    ties go to higher accuracy, then fewer passes.
    """
    size, rows = _rows_at_size(n, records)
    ok = [r for r in rows if r.accuracy(round_budget) >= requirement]
    if not ok:
        best = max(r.accuracy(round_budget) for r in rows)
        raise InfeasibleRequirementError(
            f"no (b, e) reaches accuracy {requirement} within {round_budget} rounds at n={size} "
            f"(best {best:.4f})",
            best,
        )
    pick = min(ok, key=lambda r: (r.time_per_round, -r.accuracy(round_budget), r.e))
    return pick.b, pick.e


def min_data_for(requirement: float, round_budget: int, records: Sequence[MeasurementRecord]) -> int:
    """Smallest measured dataset size reaching ``requirement`` under some ``(b, e)``."""
    if not records:
        raise ValueError("records must be nonempty")
    ok = [r.n for r in records if r.accuracy(round_budget) >= requirement]
    if not ok:
        best = max(r.accuracy(round_budget) for r in records)
        raise InfeasibleRequirementError(
            f"no measured configuration reaches accuracy {requirement} within {round_budget} rounds "
            f"(best {best:.4f})",
            best,
        )
    return min(ok)
