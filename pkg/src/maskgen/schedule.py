"""Mask schedules, loss weights, time sampling and the sampling time grid.

A mask schedule ``gamma`` maps time ``t`` in ``[0, 1]`` to the probability
that a token is masked.  All schedules here are strictly increasing, which
the exact loss evaluator relies on when it changes variables from ``t`` to
``gamma(t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

SCHEDULE_KINDS = ("linear", "cosine", "exp", "log-exp")
WEIGHT_MODES = ("constant", "mdm")

DEFAULT_RATE = 5.0
DEFAULT_EPSILON = 1e-8


def _check_unit(t):
    t = np.asarray(t, dtype=float)
    if np.any(t < 0.0) or np.any(t > 1.0) or np.any(np.isnan(t)):
        raise ValueError(f"time must lie in [0, 1], got {t}")
    return t


def _out(t_in, value):
    return float(value) if np.ndim(t_in) == 0 else value


@dataclass(frozen=True)
class MaskSchedule:
    """A named mask schedule.

    ``rate`` only affects the ``exp`` and ``log-exp`` kinds.
    """

    kind: str = "linear"
    rate: float = DEFAULT_RATE

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if not self.rate > 0:
            raise ValueError(f"rate must be positive, got {self.rate}")

    @classmethod
    def from_config(cls, value) -> "MaskSchedule":
        """Build from ``"cosine"`` or ``{"name": "exp", "rate": 5}``."""
        if isinstance(value, MaskSchedule):
            return value
        if isinstance(value, str):
            return cls(value)
        return cls(value["name"], float(value.get("rate", DEFAULT_RATE)))

    def to_config(self) -> dict:
        return {"name": self.kind, "rate": self.rate}

    def gamma(self, t):
        t_in = t
        t = _check_unit(t)
        if self.kind == "linear":
            g = t.copy()
        elif self.kind == "cosine":
            g = np.cos(0.5 * np.pi * (1.0 - t))
        elif self.kind == "exp":
            g = -np.expm1(-self.rate * t)
        else:
            g = np.log1p(np.expm1(self.rate) * t) / self.rate
        return _out(t_in, g)

    def gamma_prime(self, t):
        t_in = t
        t = _check_unit(t)
        if self.kind == "linear":
            d = np.ones_like(t)
        elif self.kind == "cosine":
            d = 0.5 * np.pi * np.sin(0.5 * np.pi * (1.0 - t))
        elif self.kind == "exp":
            d = self.rate * np.exp(-self.rate * t)
        else:
            c = np.expm1(self.rate)
            d = c / (self.rate * (1.0 + c * t))
        return _out(t_in, d)

    def inverse(self, g):
        """Time at which the schedule reaches ``g``.

        Values above ``gamma(1)`` (only possible for ``exp``) map to 1.
        """
        g_in = g
        g = np.clip(np.asarray(g, dtype=float), 0.0, None)
        if self.kind == "linear":
            t = g.copy()
        elif self.kind == "cosine":
            t = 1.0 - np.arccos(np.clip(g, 0.0, 1.0)) * 2.0 / np.pi
        elif self.kind == "exp":
            with np.errstate(divide="ignore"):
                t = -np.log1p(-np.clip(g, 0.0, 1.0)) / self.rate
        else:
            t = np.expm1(self.rate * g) / np.expm1(self.rate)
        return _out(g_in, np.clip(t, 0.0, 1.0))

    def __str__(self):
        return self.kind if self.kind in ("linear", "cosine") else f"{self.kind}({self.rate:g})"


def gamma(schedule: MaskSchedule, t):
    return schedule.gamma(t)


def gamma_prime(schedule: MaskSchedule, t):
    return schedule.gamma_prime(t)


def weight(mode: str, schedule: MaskSchedule, t, epsilon: float = DEFAULT_EPSILON):
    """Loss weight ``w(t)``.

    ``"constant"`` gives 1; ``"mdm"`` gives ``gamma'(t) / max(gamma(t), epsilon)``,
    the positive magnitude of the tabulated ``-gamma'/gamma``.
    """
    if mode == "constant":
        return _out(t, np.ones_like(_check_unit(t)))
    if mode != "mdm":
        raise ValueError(f"unknown weight mode {mode!r}; expected one of {WEIGHT_MODES}")
    g = np.maximum(np.asarray(schedule.gamma(t)), epsilon)
    return _out(t, np.asarray(schedule.gamma_prime(t)) / g)


def mdm_weight_antiderivative(schedule: MaskSchedule, t, epsilon: float = DEFAULT_EPSILON):
    """Antiderivative of the guarded ``mdm`` weight, zero at ``t = 0``."""
    g = np.asarray(schedule.gamma(t), dtype=float)
    out = np.where(g < epsilon, g / epsilon, 1.0 + np.log(np.maximum(g, epsilon) / epsilon))
    return _out(t, out)


@dataclass(frozen=True)
class TimeWindow:
    t_min: float = 0.0
    t_max: float = 1.0

    def __post_init__(self):
        if not (0.0 <= self.t_min < self.t_max <= 1.0):
            raise ValueError(f"need 0 <= t_min < t_max <= 1, got [{self.t_min}, {self.t_max}]")

    @property
    def length(self) -> float:
        return self.t_max - self.t_min


def sample_time(window: TimeWindow, rng: np.random.Generator, size=None):
    return rng.uniform(window.t_min, window.t_max, size=size)


MAR_MEAN, MAR_STD, MAR_LOW, MAR_HIGH = 1.0, 0.25, 0.7, 1.0


def mar_ratio_sample(rng: np.random.Generator, size=None):
    """Mask ratio from a normal(1.0, 0.25) truncated to [0.7, 1.0], by rejection."""
    n = 1 if size is None else int(np.prod(size))
    out = np.empty(n)
    filled = 0
    while filled < n:
        # acceptance is about 0.38, draw with headroom
        draw = rng.normal(MAR_MEAN, MAR_STD, size=max(2 * (n - filled) + 16, 64))
        draw = draw[(draw >= MAR_LOW) & (draw <= MAR_HIGH)]
        take = min(len(draw), n - filled)
        out[filled:filled + take] = draw[:take]
        filled += take
    if size is None:
        return float(out[0])
    return out.reshape(size)


class Step(NamedTuple):
    index: int
    t: float
    s: float
    gamma_t: float
    gamma_s: float


def discretize(T: int, schedule: MaskSchedule) -> list[Step]:
    """Uniform grid ``t_i = (T-i+1)/T``, ``s_i = (T-i)/T`` for ``i = 1..T``."""
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise ValueError(f"number of steps must be a positive integer, got {T!r}")
    steps = []
    for i in range(1, T + 1):
        t = (T - i + 1) / T
        s = (T - i) / T
        steps.append(Step(i, t, s, schedule.gamma(t), schedule.gamma(s)))
    return steps


def ceil_count(n: int, g: float) -> int:
    """``ceil(n * g)`` clamped to ``[0, n]``, robust to float noise like 10 * 0.3."""
    return min(n, max(0, math.ceil(round(n * g, 9))))
