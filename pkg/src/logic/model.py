"""Chemostat model for light-controlled growth of a lysine-auxotrophic strain.

State is (b, g, p): biomass (g/L), glucose (mmol/L) and intracellular lysine
(mmol/g). Lysine synthesis is driven by light through a Hill law without
leakage, and growth depends on both glucose and lysine.
"""
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np


class ParameterError(ValueError):
    """Raised when model parameters or a plant state are invalid."""


class DomainError(ValueError):
    """Raised when an input lies outside the domain of a rate law."""


@dataclass(frozen=True)
class ModelParams:
    mu_max: float = 0.982
    f_c: float = 1100.0
    Y_gb: float = 10.18
    k_g: float = 2.964e-4
    k_p: float = 1.7
    d_l: float = 0.15
    g_in: float = 200.0
    d_p: float = 20.8
    q_p_max: float = 0.3366
    n_hill: float = 0.2191
    k_I: float = 5.5086e-7
    I_max: float = 30.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ParameterError(f"{f.name} must be a number, got {value!r}")
            if not math.isfinite(value) or value <= 0:
                raise ParameterError(f"{f.name} must be finite and > 0, got {value!r}")

    def with_q_p_max(self, value):
        """Copy with a different maximal lysine synthesis rate."""
        return replace(self, q_p_max=float(value))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown model parameter(s): {', '.join(sorted(unknown))}")
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass(frozen=True)
class PlantState:
    b: float
    g: float
    p: float

    def __post_init__(self):
        for name in ("b", "g", "p"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ParameterError(f"state component {name} must be finite and >= 0, got {value!r}")

    def as_array(self):
        return np.array([self.b, self.g, self.p], dtype=float)

    @classmethod
    def from_array(cls, y):
        return cls(float(y[0]), float(y[1]), float(y[2]))

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        return cls(float(data["b"]), float(data["g"]), float(data["p"]))


def hill_activation(I, params):
    """Light-driven lysine synthesis rate q_p(I) in mmol/(g*h).

    Accepts a scalar or an array of intensities in W/m^2. The law has no
    leakage term, so q_p(0) is exactly zero.
    """
    intensity = np.asarray(I, dtype=float)
    if np.any(intensity < 0) or np.any(np.isnan(intensity)):
        raise DomainError(f"light intensity must be >= 0, got {I!r}")
    num = intensity ** params.n_hill
    rate = params.q_p_max * num / (num + params.k_I ** params.n_hill)
    if rate.ndim == 0:
        return float(rate)
    return rate


def _growth_rate(g, p, params):
    # Monod in glucose times saturation in scaled lysine
    fp = params.f_c * p
    return params.mu_max * (g / (g + params.k_g)) * (fp / (fp + params.k_p))


def kinetic_rates(x, I, params):
    """Return (mu, q_g, q_p) at state x and light intensity I."""
    mu = _growth_rate(x.g, x.p, params)
    return mu, params.Y_gb * mu, hill_activation(I, params)


def derivative(y, q_p, params):
    """State derivative for an array state y = [b, g, p] at a given q_p.

    This is the integrator-facing form of ``rhs``: the light enters only
    through q_p, which is constant on every ON/OFF subinterval.
    """
    b, g, p = y[0], y[1], y[2]
    mu = _growth_rate(g, p, params)
    return np.array([
        (mu - params.d_l) * b,
        -params.Y_gb * mu * b + (params.g_in - g) * params.d_l,
        q_p - (params.d_p + mu) * p,
    ])


def rhs(x, I, params):
    """Chemostat right-hand side (db/dt, dg/dt, dp/dt) at state x under intensity I."""
    return derivative(x.as_array(), hill_activation(I, params), params)


def jacobian(y, params):
    """Jacobian of ``derivative`` with respect to y = [b, g, p].

    The light enters only additively through q_p, so it does not appear here.
    """
    b, g, p = y[0], y[1], y[2]
    fp = params.f_c * p
    glucose = g / (g + params.k_g)
    lysine = fp / (fp + params.k_p)
    mu = params.mu_max * glucose * lysine
    dmu_dg = params.mu_max * params.k_g / (g + params.k_g) ** 2 * lysine
    dmu_dp = params.mu_max * glucose * params.f_c * params.k_p / (fp + params.k_p) ** 2
    return np.array([
        [mu - params.d_l, dmu_dg * b, dmu_dp * b],
        [-params.Y_gb * mu, -params.Y_gb * dmu_dg * b - params.d_l, -params.Y_gb * dmu_dp * b],
        [0.0, -dmu_dg * p, -(params.d_p + mu) - dmu_dp * p],
    ])
