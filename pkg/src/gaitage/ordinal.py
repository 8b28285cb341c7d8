"""Conversion between scalar ages and stacked binary rank indicators.

A rank grid r_k = r_min + (k - 1) * eta, k = 1..K, turns age regression
into K - 1 binary questions "is the age greater than r_k?". Encoding
produces the indicator vector plus its softmax-normalized distribution;
decoding counts classifier outputs above 0.5 and walks back up the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import AgeRangeError, ConfigError, DomainError
from .tensor import softmax

VIOLATION_TOL = 1e-9


@dataclass(frozen=True)
class RankSpec:
    """Uniform rank grid: ``count`` ranks starting at ``r_min``, step ``eta``."""

    r_min: float
    eta: float
    count: int

    def __post_init__(self):
        object.__setattr__(self, "r_min", float(self.r_min))
        object.__setattr__(self, "eta", float(self.eta))
        object.__setattr__(self, "count", int(self.count))
        if self.count < 2:
            raise ConfigError(f"rank count must be >= 2, got {self.count}")
        if not self.eta > 0:
            raise ConfigError(f"rank interval must be positive, got {self.eta}")

    @property
    def k_minus_1(self) -> int:
        return self.count - 1

    @property
    def r_max(self) -> float:
        return self.r_min + (self.count - 1) * self.eta

    @property
    def ranks(self) -> np.ndarray:
        return self.r_min + self.eta * np.arange(self.count)

    @classmethod
    def from_range(cls, age_min: float, age_max: float, eta: float) -> "RankSpec":
        """Grid covering [age_min, age_max]; the span must be a multiple of eta."""
        steps = (age_max - age_min) / eta
        count = round(steps) + 1
        if count < 2 or abs(steps - round(steps)) > 1e-9:
            raise ConfigError(
                f"range [{age_min}, {age_max}] is not a whole number of "
                f"{eta}-year steps")
        return cls(float(age_min), float(eta), count)


@dataclass(frozen=True)
class OrdinalTarget:
    """Indicator bits for one sample and their softmax distribution."""

    bits: np.ndarray
    dist: np.ndarray


def snap_to_grid(age: float, spec: RankSpec) -> float:
    """Nearest rank to ``age``; exact midpoints round down."""
    if age < spec.r_min or age > spec.r_max:
        raise AgeRangeError(
            f"age {age} outside rank range [{spec.r_min}, {spec.r_max}]")
    steps = (age - spec.r_min) / spec.eta
    idx = math.ceil(steps - 0.5)
    return spec.r_min + idx * spec.eta


def encode(age: float, spec: RankSpec) -> OrdinalTarget:
    """Indicator vector bits[k] = 1 iff age > r_k, for k = 1..K-1.

    Off-grid ages are snapped to the nearest rank first. The companion
    distribution is the softmax of the bits.
    """
    snapped = snap_to_grid(age, spec)
    thresholds = spec.ranks[:-1]
    bits = (snapped > thresholds + 1e-9 * spec.eta).astype(np.float64)
    dist, _ = softmax(bits)
    return OrdinalTarget(bits, dist)


def encode_batch(ages: np.ndarray, spec: RankSpec) -> np.ndarray:
    """Indicator matrix of shape (N, K-1) for a vector of ages."""
    ages = np.asarray(ages, dtype=np.float64)
    lo, hi = spec.r_min, spec.r_max
    bad = (ages < lo) | (ages > hi)
    if bad.any():
        i = int(np.argmax(bad))
        raise AgeRangeError(
            f"age {ages[i]} outside rank range [{lo}, {hi}]")
    idx = np.ceil((ages - lo) / spec.eta - 0.5)
    snapped = lo + idx * spec.eta
    thresholds = spec.ranks[:-1]
    return (snapped[:, None] > thresholds[None, :] + 1e-9 * spec.eta).astype(np.float64)


def decode(probs: np.ndarray, spec: RankSpec) -> float:
    """Age r_min + eta * |{k : probs[k] > 0.5}|.

    Defined for non-monotone inputs too: every entry above 0.5 counts,
    wherever it sits.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (spec.k_minus_1,):
        raise DomainError(
            f"expected {spec.k_minus_1} probabilities, got shape {probs.shape}")
    if (probs < 0).any() or (probs > 1).any():
        raise DomainError("classifier probabilities must lie in [0, 1]")
    return float(spec.r_min + spec.eta * np.count_nonzero(probs > 0.5))


def decode_batch(probs: np.ndarray, spec: RankSpec) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[1] != spec.k_minus_1:
        raise DomainError(
            f"expected (N, {spec.k_minus_1}) probabilities, got {probs.shape}")
    if (probs < 0).any() or (probs > 1).any():
        raise DomainError("classifier probabilities must lie in [0, 1]")
    return spec.r_min + spec.eta * (probs > 0.5).sum(axis=1)


def monotonicity_violation_rate(probs_batch: np.ndarray) -> float:
    """Fraction of adjacent classifier pairs that are out of order.

    A pair (k-1, k) violates when probs[k] > probs[k-1] + 1e-9. Vectors
    with a single classifier contribute no pairs; an empty batch is an
    error.
    """
    probs = np.asarray(probs_batch, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[None, :]
    if probs.size == 0 or probs.shape[0] == 0:
        raise DomainError("monotonicity_violation_rate needs a nonempty batch")
    if probs.shape[1] < 2:
        return 0.0
    violations = probs[:, 1:] > probs[:, :-1] + VIOLATION_TOL
    return float(violations.mean())
