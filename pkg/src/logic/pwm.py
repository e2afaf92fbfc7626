"""Pulse-width modulation of the light input.

Each forcing period [kT, (k+1)T) carries exactly one ON->OFF switch at
tau = (k + D)T: the light is at I_max on [kT, tau) and off on [tau, (k+1)T).
"""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import pandas as pd

from logic.model import DomainError, hill_activation

logger = logging.getLogger(__name__)

DOSE_RESPONSE_COLUMNS = ["mode", "input_normalized", "activation_normalized"]


@dataclass(frozen=True)
class ForcingGrid:
    T: float = 1.0
    n_T: int = 24

    def __post_init__(self):
        if not math.isfinite(self.T) or self.T <= 0:
            raise DomainError(f"period length T must be > 0, got {self.T!r}")
        if int(self.n_T) != self.n_T or self.n_T < 1:
            raise DomainError(f"number of periods n_T must be an integer >= 1, got {self.n_T!r}")

    @property
    def t_f(self):
        return self.n_T * self.T

    def period_start(self, k):
        return k * self.T

    def period_end(self, k):
        return (k + 1) * self.T

    def boundary_times(self):
        """Period end times t_1 .. t_{n_T}."""
        return [self.period_end(k) for k in range(self.n_T)]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(T=float(data.get("T", 1.0)), n_T=int(data.get("n_T", 24)))


@dataclass(frozen=True)
class PwmPeriodPlan:
    k: int
    D: float
    tau: float
    T: float
    channel: int = 0

    def __post_init__(self):
        _check_duty(self.D)
        if self.tau != (self.k + self.D) * self.T:
            raise DomainError(f"switching time {self.tau!r} does not match (k + D)T for k={self.k}, D={self.D}")

    @classmethod
    def from_duty(cls, k, D, grid, channel=0):
        return cls(k=k, D=float(D), tau=duty_to_switch_time(k, D, grid), T=grid.T, channel=channel)

    @property
    def start(self):
        return self.k * self.T

    @property
    def end(self):
        return (self.k + 1) * self.T


def _check_duty(D):
    if not (0.0 <= D <= 1.0):
        raise DomainError(f"duty cycle must lie in [0, 1], got {D!r}")


def _check_period(k, grid):
    if int(k) != k or not (0 <= k < grid.n_T):
        raise DomainError(f"period index must be in [0, {grid.n_T}), got {k!r}")


def duty_to_switch_time(k, D, grid):
    """Switching time tau = (k + D)T of period k."""
    _check_duty(D)
    _check_period(k, grid)
    return (k + D) * grid.T


def switch_time_to_duty(k, tau, grid):
    """Duty cycle D = (tau - kT)/T encoded by a switching time."""
    _check_period(k, grid)
    if not (grid.period_start(k) <= tau <= grid.period_end(k)):
        raise DomainError(f"switching time {tau!r} lies outside period {k}")
    return min(1.0, max(0.0, (tau - k * grid.T) / grid.T))


def _check_in_period(t, plan):
    if not (plan.start <= t < plan.end):
        raise DomainError(f"time {t!r} lies outside period {plan.k} [{plan.start}, {plan.end})")


def binary_input(t, plan):
    """Binary ON/OFF input u_k(t): 1 on [kT, tau), 0 on [tau, (k+1)T)."""
    _check_in_period(t, plan)
    return 1 if t < plan.tau else 0


def intensity_at(t, plan, I_max):
    """Physical light intensity at time t within the plan's period."""
    return binary_input(t, plan) * I_max


def switching_segments(plans, I_max):
    """Split one forcing period into pieces of constant light.

    ``plans`` holds one plan per light channel (all for the same period) and
    ``I_max`` the matching maximum intensities. Returns a list of
    ``(t_start, t_end, intensities)`` with zero-length pieces dropped.
    """
    plans = list(plans)
    maxima = np.atleast_1d(np.asarray(I_max, dtype=float))
    if not plans:
        raise DomainError("at least one channel plan is required")
    if len(maxima) != len(plans):
        raise DomainError(f"{len(plans)} channel plan(s) but {len(maxima)} maximum intensities")
    if len({(p.k, p.T) for p in plans}) != 1:
        raise DomainError("channel plans must share the same forcing period")

    start, end = plans[0].start, plans[0].end
    cuts = sorted({start, end, *(p.tau for p in plans)})
    segments = []
    for t0, t1 in zip(cuts[:-1], cuts[1:]):
        if t1 <= t0:
            continue
        # a piece is ON for a channel iff it starts before that channel's switch
        intensities = tuple(float(m) if t0 < p.tau else 0.0 for p, m in zip(plans, maxima))
        segments.append((t0, t1, intensities))
    return segments


def on_fraction(plans, I_max):
    """Fraction of the period each channel spends ON, recovered from its segments."""
    segments = switching_segments(plans, I_max)
    T = plans[0].T
    return [
        sum(t1 - t0 for t0, t1, light in segments if light[c] > 0) / T
        for c in range(len(plans))
    ]


def period_avg_activation(D, params):
    """Period-averaged lysine synthesis rate under duty cycle D: D * q_p(I_max)."""
    _check_duty(D)
    return D * hill_activation(params.I_max, params)


def dose_response_table(n_points, params):
    """Normalized activation versus normalized input for both actuation modes."""
    if int(n_points) != n_points or n_points < 2:
        raise DomainError(f"n_points must be an integer >= 2, got {n_points!r}")
    grid = np.linspace(0.0, 1.0, int(n_points))
    intensity_activation = hill_activation(grid * params.I_max, params) / params.q_p_max
    full_on = hill_activation(params.I_max, params) / params.q_p_max
    intensity = pd.DataFrame({
        "mode": "intensity",
        "input_normalized": grid,
        "activation_normalized": intensity_activation,
    })
    pwm = pd.DataFrame({
        "mode": "pwm",
        "input_normalized": grid,
        "activation_normalized": grid * full_on,
    })
    return pd.concat([intensity, pwm], ignore_index=True)[DOSE_RESPONSE_COLUMNS]


def write_dose_response_csv(table, path):
    table.to_csv(path, index=False, lineterminator="\n")
    logger.info("Wrote %d dose-response rows to %s", len(table), path)
