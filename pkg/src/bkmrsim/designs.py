"""Experiment matrix: null-response (test-size) and signal (power) designs."""
from __future__ import annotations

import fnmatch
import json
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import InvalidInputError, UndefinedCVError
from .simgen import METALS, REGIMES

METHOD1_MEANS = (-4.25, -2.4, -1.9, -1.61, -1.27, -0.70, -0.50, -0.30,
                 -0.223, -0.19, -0.08, -0.05, -0.025, -0.01, 0.94)
METHOD1_SD = 0.10
METHOD2_SDS = (0.10, 0.25, 0.50, 0.67, 1.0, 1.5, 2.0, 3.5, 5.0, 7.5, 10.0, 15.0)
METHOD2_MEAN = -1.0

# name -> (c_lead, c_mercury, c_interaction, multiplier, treated)
POWER_DESIGNS = {
    "Normal Low": (-0.03, 0.0, 0.0, 1.0, ("lead",)),
    "Normal Medium": (-0.08, 0.0, 0.0, 1.0, ("lead",)),
    "Normal High": (-0.12, 0.0, 0.0, 1.0, ("lead",)),
    "Skewed Low": (0.0, -0.02, 0.0, 1.0, ("mercury",)),
    "Skewed Medium": (0.0, -0.10, 0.0, 1.0, ("mercury",)),
    "Skewed High": (0.0, -0.15, 0.0, 1.0, ("mercury",)),
    "Interaction Low": (0.0, 0.0, -0.01, 1.0, ("lead", "mercury")),
    "Interaction Medium": (0.0, 0.0, -0.05, 1.0, ("lead", "mercury")),
    "Interaction High": (0.0, 0.0, -0.10, 1.0, ("lead", "mercury")),
    "Full Factorial Low": (-0.03, -0.04, -0.01, 0.5, ("lead", "mercury")),
    "Full Factorial Medium": (-0.07, -0.06, -0.03, 0.5, ("lead", "mercury")),
    "Full Factorial High": (-0.12, -0.08, -0.05, 0.5, ("lead", "mercury")),
}


def coefficient_of_variation(mean: float, sd: float) -> float:
    """|sd / mean|; undefined (error) for a zero mean."""
    if not sd > 0:
        raise InvalidInputError(f"sd must be positive, got {sd}")
    if mean == 0:
        raise UndefinedCVError("coefficient of variation is undefined for mean 0")
    return abs(sd / mean)


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9.+-]+", "-", text.lower()).strip("-")


@dataclass(frozen=True)
class TestSizeDesign:
    method: int
    mean: float
    sd: float
    regime: str

    __test__ = False  # keep pytest from collecting this as a test class

    def __post_init__(self):
        if not self.sd > 0:
            raise InvalidInputError("response sd must be positive")
        if self.regime not in REGIMES:
            raise InvalidInputError(f"unknown regime {self.regime!r}")

    kind = "test-size"

    @property
    def name(self) -> str:
        if self.method == 1:
            return f"test-size:method1:mean={self.mean:g}"
        return f"test-size:method2:sd={self.sd:g}"

    @property
    def cv(self) -> float:
        return coefficient_of_variation(self.mean, self.sd)

    @property
    def design_id(self) -> str:
        return f"{self.regime}/{self.name}"

    @property
    def slug(self) -> str:
        return f"{self.regime}__{_slug(self.name)}"

    @property
    def treated(self) -> Tuple[str, ...]:
        return ()

    def to_dict(self) -> dict:
        return {"id": self.design_id, "kind": self.kind, "name": self.name,
                "regime": self.regime, "method": self.method,
                "mean": self.mean, "sd": self.sd, "cv": self.cv, "treated": []}


@dataclass(frozen=True)
class PowerDesign:
    name: str
    c_lead: float
    c_mercury: float
    c_interaction: float
    multiplier: float
    treated: Tuple[str, ...]
    regime: str

    kind = "power"

    def __post_init__(self):
        if not self.treated or not set(self.treated) <= set(METALS):
            raise InvalidInputError("treated set must be a nonempty subset of the metals")
        if self.regime not in REGIMES:
            raise InvalidInputError(f"unknown regime {self.regime!r}")

    @property
    def design_id(self) -> str:
        return f"{self.regime}/{self.name}"

    @property
    def slug(self) -> str:
        return f"{self.regime}__{_slug(self.name)}"

    def signal(self, lead, mercury) -> np.ndarray:
        lead = np.asarray(lead, dtype=float)
        mercury = np.asarray(mercury, dtype=float)
        if lead.shape != mercury.shape:
            raise InvalidInputError("lead and mercury must have equal lengths")
        return self.multiplier * (self.c_lead * lead + self.c_mercury * mercury
                                  + self.c_interaction * lead * mercury)

    def to_dict(self) -> dict:
        return {"id": self.design_id, "kind": self.kind, "name": self.name,
                "regime": self.regime, "c_lead": self.c_lead,
                "c_mercury": self.c_mercury, "c_interaction": self.c_interaction,
                "multiplier": self.multiplier, "treated": list(self.treated)}


ExperimentDesign = Union[TestSizeDesign, PowerDesign]


@dataclass(frozen=True)
class NoiseSpec:
    sd: float = 2.0
    mean: float = 0.0
    seed: Optional[int] = None

    def __post_init__(self):
        if not self.sd > 0:
            raise InvalidInputError("noise sd must be positive")


def build_design_registry() -> List[ExperimentDesign]:
    """All 78 designs: 27 test-size and 12 power designs per covariance regime."""
    out: List[ExperimentDesign] = []
    for regime in REGIMES:
        out += [TestSizeDesign(1, m, METHOD1_SD, regime) for m in METHOD1_MEANS]
        out += [TestSizeDesign(2, METHOD2_MEAN, s, regime) for s in METHOD2_SDS]
        out += [PowerDesign(name, *coefs, regime) for name, coefs in POWER_DESIGNS.items()]
    return out


def select_designs(patterns: Sequence[str], regimes: Optional[Sequence[str]] = None,
                   registry: Optional[List[ExperimentDesign]] = None) -> List[ExperimentDesign]:
    """Registry entries whose name or id matches any pattern (shell-style globs,
    case-insensitive), optionally restricted to the given regimes."""
    registry = build_design_registry() if registry is None else registry
    regimes = list(REGIMES) if not regimes else list(regimes)
    bad = set(regimes) - set(REGIMES)
    if bad:
        raise InvalidInputError(f"unknown regime(s) {sorted(bad)}")
    chosen = []
    for pat in patterns:
        p = pat.lower()
        hits = [d for d in registry if d.regime in regimes
                and (fnmatch.fnmatchcase(d.name.lower(), p)
                     or fnmatch.fnmatchcase(d.design_id.lower(), p))]
        if not hits:
            raise InvalidInputError(f"no design matches {pat!r}")
        chosen += [d for d in hits if d not in chosen]
    return chosen


def export_registry(path, registry: Optional[List[ExperimentDesign]] = None) -> None:
    registry = build_design_registry() if registry is None else registry
    with open(path, "w") as fh:
        json.dump([d.to_dict() for d in registry], fh, indent=2)
        fh.write("\n")


def generate_null_response(n: int, design: TestSizeDesign, rng) -> np.ndarray:
    """i.i.d. Normal(mean, sd^2), independent of the exposures."""
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    return rng.normal(design.mean, design.sd, size=n)


def generate_signal_response(design: PowerDesign, lead, mercury, noise: NoiseSpec,
                             rng=None, eps=None) -> np.ndarray:
    """Signal plus Normal(noise.mean, noise.sd^2) noise.

    ``eps`` supplies a pre-drawn noise vector (shared-noise mode); otherwise
    noise is drawn from ``rng``.
    """
    signal = design.signal(lead, mercury)
    if eps is None:
        if rng is None:
            rng = np.random.default_rng(noise.seed)
        eps = rng.normal(noise.mean, noise.sd, size=signal.shape[0])
    eps = np.asarray(eps, dtype=float)
    if eps.shape != signal.shape:
        raise InvalidInputError("noise vector length does not match the exposures")
    return signal + eps
