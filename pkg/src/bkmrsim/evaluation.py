"""PIP thresholding, rejection rates, confusion rates and summary metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .errors import InvalidInputError

DEFAULT_THRESHOLD_GRID = tuple(np.round(np.arange(1, 10) / 10, 1))
_ROUNDING_TOL = 0.011  # two independently rounded 2-decimal rates


@dataclass(frozen=True)
class DetectionRule:
    pip_threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.pip_threshold < 1:
            raise InvalidInputError("PIP threshold must lie strictly between 0 and 1")


@dataclass(frozen=True)
class ConfusionRates:
    tp: float
    fp: float
    fn: float
    tn: float

    def __post_init__(self):
        for k in ("tp", "fp", "fn", "tn"):
            v = getattr(self, k)
            if not 0 <= v <= 1:
                raise InvalidInputError(f"{k} must lie in [0, 1], got {v}")
        if abs(self.tp + self.fn - 1) > _ROUNDING_TOL:
            raise InvalidInputError("tp + fn must equal 1")
        if abs(self.fp + self.tn - 1) > _ROUNDING_TOL:
            raise InvalidInputError("fp + tn must equal 1")


@dataclass(frozen=True)
class MetricSet:
    accuracy: float
    precision: float
    recall: float
    f1: float
    flags: tuple = field(default=())


def detect(pips, rule: DetectionRule = DetectionRule()) -> np.ndarray:
    pips = np.asarray(pips, dtype=float)
    if np.any(~np.isfinite(pips)) or np.any(pips < 0) or np.any(pips > 1):
        raise InvalidInputError("PIPs must lie in [0, 1]")
    return pips > rule.pip_threshold


def rejection_rates(detections) -> np.ndarray:
    """Fraction of replicates (rows) in which each metal was detected."""
    d = np.asarray(detections, dtype=bool)
    if d.ndim != 2 or d.shape[0] == 0:
        raise InvalidInputError("need an R x M detection matrix with R >= 1")
    return d.mean(axis=0)


def confusion_from_rates(rates, treated: Sequence[str], names: Sequence[str]) -> ConfusionRates:
    """tp/fp as the mean marginal rate over treated / untreated metals."""
    rates = np.asarray(rates, dtype=float)
    names = list(names)
    if rates.shape != (len(names),):
        raise InvalidInputError("rates must have one entry per metal")
    if not treated:
        raise InvalidInputError("treated set must be nonempty")
    unknown = set(treated) - set(names)
    if unknown:
        raise InvalidInputError(f"treated metals not found: {sorted(unknown)}")
    mask = np.isin(names, list(treated))
    tp = float(rates[mask].mean())
    fp = float(rates[~mask].mean()) if np.any(~mask) else 0.0
    return ConfusionRates(tp, fp, 1.0 - tp, 1.0 - fp)


def _ratio(num, den, label, flags):
    if den == 0:
        flags.append(f"{label}: zero denominator")
        return 0.0
    return num / den


def metrics_from_confusion(c: ConfusionRates) -> MetricSet:
    """Accuracy, precision, recall and F1 (harmonic mean of precision and recall)."""
    flags: List[str] = []
    accuracy = _ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn, "accuracy", flags)
    precision = _ratio(c.tp, c.tp + c.fp, "precision", flags)
    recall = _ratio(c.tp, c.tp + c.fn, "recall", flags)
    f1 = _ratio(2 * precision * recall, precision + recall, "f1", flags)
    return MetricSet(accuracy, precision, recall, f1, tuple(flags))


def threshold_sweep(pips, thresholds=DEFAULT_THRESHOLD_GRID) -> Dict[float, np.ndarray]:
    """Rejection rates for each threshold; ``pips`` is R x M."""
    pips = np.asarray(pips, dtype=float)
    return {float(t): rejection_rates(detect(pips, DetectionRule(float(t)))) for t in thresholds}


@dataclass
class TestSizeRow:
    regime: str
    design: str
    cv: float
    metal: str
    rate: float
    uncontrolled: bool

    __test__ = False


def test_size_report(rates_by_design: Mapping, names: Sequence[str],
                     nominal: float = 0.05) -> List[TestSizeRow]:
    """Controlled / uncontrolled verdict (rate > nominal) per design and metal.

    ``rates_by_design`` maps test-size designs to per-metal rejection rates.
    Rows are grouped by regime and sorted by CV.
    """
    rows = []
    for design, rates in rates_by_design.items():
        if getattr(design, "kind", None) != "test-size":
            raise InvalidInputError(
                f"{getattr(design, 'design_id', design)!r} is not a test-size design")
        rates = np.asarray(rates, dtype=float)
        for metal, rate in zip(names, rates):
            rows.append(TestSizeRow(design.regime, design.name, design.cv, metal,
                                    float(rate), bool(rate > nominal)))
    rows.sort(key=lambda r: (r.regime, r.cv, r.design, list(names).index(r.metal)))
    return rows


test_size_report.__test__ = False
