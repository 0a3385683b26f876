"""Decreasing scale factor for helper branches: cosine and step-exponential.

The factor f starts at exactly 1, never increases, and hits exactly 0 after
finitely many steps (cosine: at the decay step, exponential: at the first
plateau whose value drops below the cutoff). Steps are counted in epochs by
default; per-layer overrides of the decay step give each expanded layer its
own clock.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Collection, Mapping

FAMILIES = ("cosine", "exponential")
UNITS = ("epoch", "iteration")


def cosine_decay(alpha: float, beta: float) -> float:
    """f = 0.5 + 0.5 * cos(pi * min(alpha, beta) / beta)."""
    _check_step(alpha, beta)
    return 0.5 + 0.5 * math.cos(math.pi * min(alpha, beta) / beta)


def exp_decay(alpha: float, beta: float, delta: float, epsilon: float) -> float:
    """f = delta^floor(alpha / beta), snapped to exactly 0 once below epsilon."""
    _check_step(alpha, beta)
    if not 0.0 < delta < 1.0:
        raise ValueError(f"decay rate must lie in (0, 1), got {delta}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"cutoff threshold must lie in (0, 1), got {epsilon}")
    value = delta ** math.floor(alpha / beta)
    return value if value >= epsilon else 0.0


def _check_step(alpha: float, beta: float) -> None:
    if alpha < 0:
        raise ValueError(f"step must be >= 0, got {alpha}")
    if beta <= 0:
        raise ValueError(f"decay step must be > 0, got {beta}")


@dataclass(frozen=True)
class DecaySchedule:
    """One decay law shared by all expanded layers, with optional per-layer
    decay steps (asynchronous mode)."""

    family: str = "cosine"
    beta: float = 50.0
    delta: float | None = None
    epsilon: float | None = None
    unit: str = "epoch"
    overrides: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown decay family {self.family!r}")
        if self.unit not in UNITS:
            raise ValueError(f"unknown decay step unit {self.unit!r}")
        if self.beta <= 0:
            raise ValueError(f"decay step must be > 0, got {self.beta}")
        if self.family == "exponential":
            if self.delta is None or self.epsilon is None:
                raise ValueError("exponential decay needs both rate and cutoff threshold")
            if not 0.0 < self.delta < 1.0:
                raise ValueError(f"decay rate must lie in (0, 1), got {self.delta}")
            if not 0.0 < self.epsilon < 1.0:
                raise ValueError(f"cutoff threshold must lie in (0, 1), got {self.epsilon}")
        for layer_id, b in self.overrides.items():
            if b <= 0:
                raise ValueError(f"decay step override for {layer_id!r} must be > 0, got {b}")

    def value(self, alpha: float, beta: float | None = None) -> float:
        """Evaluate the family function at step ``alpha``."""
        b = self.beta if beta is None else beta
        if self.family == "cosine":
            return cosine_decay(alpha, b)
        return exp_decay(alpha, b, self.delta, self.epsilon)

    def zero_step(self, beta: float | None = None) -> float:
        """First step at which the factor is exactly 0."""
        b = self.beta if beta is None else beta
        if self.family == "cosine":
            return b
        plateaus = math.ceil(math.log(self.epsilon) / math.log(self.delta))
        return plateaus * b


def factor_for_layer(
    schedule: DecaySchedule,
    layer_id: str,
    step: float,
    expanded_ids: Collection[str],
) -> float:
    """Factor for one expanded layer, honoring its decay step override."""
    if layer_id not in expanded_ids:
        raise ValueError(f"layer {layer_id!r} is not expanded; it has no decay factor")
    return schedule.value(step, schedule.overrides.get(layer_id))


def validate_overrides(schedule: DecaySchedule, expanded_ids: Collection[str]) -> None:
    """Reject overrides naming layers that are not expanded."""
    stray = sorted(set(schedule.overrides) - set(expanded_ids))
    if stray:
        raise ValueError(f"decay step overrides on non-expanded layers: {', '.join(stray)}")
