"""Evaluation metrics: NMSE, tolerance accuracy and valid-candidate rate."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Iterable

import numpy as np

SPLITS = ("train", "id_test", "ood_test")

# Tolerances used per benchmark when reporting accuracy.
BENCHMARK_TAU = {
    "oscillator1": 0.001,
    "oscillator2": 0.001,
    "ecoli_growth": 0.1,
    "stress_strain_csv": 0.1,
    "lsr_transform_I_37_4": 0.1,
    "lsr_transform_III_4_33": 0.1,
    "lsr_synth_crk0": 0.1,
}
DEFAULT_TAU = 0.1
VALID_RATE_WINDOW = 40


class DegenerateTargetsError(ValueError):
    """Targets have zero variance so NMSE is undefined."""


@dataclass(frozen=True)
class MetricReport:
    nmse: float
    acc_tau: float
    tau: float
    n_points: int
    split: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        if not (self.tau > 0 and 0.0 <= self.acc_tau <= 1.0 and self.nmse >= 0 and self.n_points > 0):
            raise ValueError(f"invalid metric report {self}")

    def to_dict(self) -> dict:
        return asdict(self)


def _pair(predictions, targets):
    p = np.asarray(predictions, dtype=float).reshape(-1)
    t = np.asarray(targets, dtype=float).reshape(-1)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {t.size} targets")
    return p, t


def nmse(predictions, targets) -> float:
    """Sum of squared errors divided by the targets' sum of squared deviations."""
    p, t = _pair(predictions, targets)
    if t.size < 2:
        raise ValueError("nmse needs at least two points")
    denom = float(np.sum((t - t.mean()) ** 2))
    if denom == 0.0:
        raise DegenerateTargetsError("targets are all identical")
    return float(np.sum((p - t) ** 2)) / denom


def acc_tau(predictions, targets, tau: float) -> float:
    """Fraction of points with ``|(pred - y) / y| <= tau``.

    Zero targets only count as hits on an exact match, since the relative
    error is undefined there.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    p, t = _pair(predictions, targets)
    if t.size == 0:
        raise ValueError("acc_tau needs at least one point")
    nonzero = t != 0
    hits = np.zeros(t.size, dtype=bool)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        rel = np.abs((p[nonzero] - t[nonzero]) / t[nonzero])
    hits[nonzero] = rel <= tau
    hits[~nonzero] = p[~nonzero] == 0
    return float(np.mean(hits))


def valid_rate(window: Iterable) -> float:
    """Fraction of candidates in ``window`` that are not INVALID.

    Accepts candidates (anything with a ``category``) or bare categories.
    """
    cats = [getattr(c, "category", c) for c in window]
    if not cats:
        raise ValueError("valid_rate needs a non-empty window")
    return sum(1 for c in cats if str(getattr(c, "value", c)) != "invalid") / len(cats)


def report(predictions, targets, tau: float, split: str) -> MetricReport:
    p, t = _pair(predictions, targets)
    return MetricReport(nmse=nmse(p, t), acc_tau=acc_tau(p, t, tau), tau=tau, n_points=int(t.size), split=split)
