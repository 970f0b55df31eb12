"""Confidence measures, threshold schedules and the exit rule."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError

SIMPLEX_TOL = 1e-5


class ConfidenceMeasure(str, enum.Enum):
    MAX_SOFTMAX = "max_softmax"
    TOP2_DIFF = "top2_diff"


class ScheduleKind(str, enum.Enum):
    STATIC = "static"
    DECAYING = "decaying"


@dataclass(frozen=True)
class ThresholdSchedule:
    kind: ScheduleKind = ScheduleKind.STATIC
    lam: float = 0.6
    tau: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        if not (0.0 <= self.lam <= 1.0):
            raise ConfigError(f"lambda must be in [0, 1], got {self.lam}")
        if not (self.tau >= 0.0 and math.isfinite(self.tau)):
            raise ConfigError(f"tau must be a finite non-negative number, got {self.tau}")


@dataclass(frozen=True)
class ExitPolicy:
    """Everything that decides when a token leaves the layer stack.

    ``prune_exit`` is 1-based; ``None`` disables vocabulary pruning.
    Defaults mirror a top-2-difference, static-threshold setup with
    pruning at exit 2.
    """

    measure: ConfidenceMeasure = ConfidenceMeasure.TOP2_DIFF
    schedule: ThresholdSchedule = field(default_factory=ThresholdSchedule)
    prune_exit: int | None = 2
    prune_size: int = 64
    max_new_tokens: int = 16

    def __post_init__(self):
        object.__setattr__(self, "measure", ConfidenceMeasure(self.measure))
        if self.max_new_tokens < 0:
            raise ConfigError(f"max_new_tokens must be >= 0, got {self.max_new_tokens}")
        if self.prune_exit is not None and self.prune_exit < 1:
            raise ConfigError(f"prune_exit must be >= 1, got {self.prune_exit}")
        if self.prune_size < 1:
            raise ConfigError(f"prune_size must be >= 1, got {self.prune_size}")
        if self.prune_exit is not None and self.measure is ConfidenceMeasure.TOP2_DIFF and self.prune_size < 2:
            raise ConfigError("top-2 difference needs prune_size >= 2")

    def validate_for(self, config) -> None:
        """Check the invariants that depend on the model shape."""
        if self.prune_exit is not None:
            if not 1 <= self.prune_exit < config.L:
                raise ConfigError(
                    f"prune_exit must be in [1, {config.L - 1}] for an L={config.L} model, "
                    f"got {self.prune_exit}"
                )
            if not 1 <= self.prune_size <= config.d_vocab:
                raise ConfigError(
                    f"prune_size must be in [1, {config.d_vocab}], got {self.prune_size}"
                )

    def threshold(self, t: int) -> float:
        return threshold_at(self.schedule, t, self.max_new_tokens)


def confidence(probs: np.ndarray, measure: ConfidenceMeasure) -> float:
    """Confidence of a probability vector, in [0, 1]."""
    probs = np.asarray(probs)
    if probs.ndim != 1 or probs.size == 0:
        raise InvalidInputError("confidence needs a non-empty 1-D probability vector")
    total = float(probs.sum(dtype=np.float64))
    if abs(total - 1.0) > SIMPLEX_TOL or probs.min() < 0:
        raise InvalidInputError(f"probabilities must lie on the simplex (sum={total})")
    measure = ConfidenceMeasure(measure)
    if measure is ConfidenceMeasure.MAX_SOFTMAX:
        value = float(probs.max())
    else:
        if probs.size < 2:
            raise InvalidInputError("top-2 difference needs at least two probabilities")
        second, first = np.partition(probs, probs.size - 2)[-2:]
        value = float(first) - float(second)
    return min(max(value, 0.0), 1.0)


def threshold_at(schedule: ThresholdSchedule, t: int, n: int) -> float:
    """Exit threshold for the ``t``-th generated token (0-based) of ``n``.

    Decaying thresholds follow ``clamp(0.9*lam + 0.1*exp(-tau*t/n))``.
    """
    if not 0 <= t < n:
        raise InvalidInputError(f"token index {t} outside [0, {n})")
    if schedule.kind is ScheduleKind.STATIC:
        return float(schedule.lam)
    value = 0.9 * schedule.lam + 0.1 * math.exp(-schedule.tau * t / n)
    return min(max(value, 0.0), 1.0)


def should_exit(c: float, threshold: float) -> bool:
    return c >= threshold
