"""Episodic chemostat environment driven by one light channel.

One environment step is one forcing period. The plant is integrated with a
fixed-step RK4 scheme that is split exactly at the ON->OFF switching time.
When glucose runs low its equation turns stiff, and the rest of that
subinterval is finished by scipy's Radau solver on the same output grid. The
reward is the negative weighted squared biomass tracking error at the
end of the period.
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import gymnasium as gym
import numpy as np
import pandas as pd
from gymnasium import spaces
from scipy.integrate import solve_ivp, trapezoid

from logic.model import DomainError, ModelParams, PlantState, derivative, hill_activation, jacobian
from logic.pwm import ForcingGrid, PwmPeriodPlan, switching_segments

logger = logging.getLogger(__name__)

OBSERVATION_DIM = 9
TRACE_COLUMNS = ["t", "b", "g", "p", "I", "period", "action", "reward"]
TRUNCATION_FLOOR = 1e-9

# RK4 hands over to Radau once h * |lambda| exceeds this (glucose near depletion)
STIFFNESS_LIMIT = 1.0
IMPLICIT_RTOL = 1e-8
IMPLICIT_ATOL = 1e-11

# network-facing scales for b (g/L) and p (mmol/g); g is scaled by g_in
BIOMASS_SCALE = 10.0
LYSINE_SCALE = 1e-3


class ScenarioError(ValueError):
    """Raised when a scenario or reference trajectory is invalid."""


class EpisodeFailure(RuntimeError):
    """Raised when the plant state stops being finite."""

    def __init__(self, message, time):
        super().__init__(f"{message} at t={time:.6g} h")
        self.time = time


class ActuationMode(str, Enum):
    PWM = "pwm"
    INTENSITY = "intensity"


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Piecewise-constant biomass setpoints as (segment end time, setpoint) pairs."""

    segments: tuple = ((8.0, 3.0), (16.0, 5.0), (24.0, 7.0))

    def __post_init__(self):
        segments = tuple((float(end), float(sp)) for end, sp in self.segments)
        object.__setattr__(self, "segments", segments)
        if not segments:
            raise ScenarioError("reference needs at least one segment")
        ends = [end for end, _ in segments]
        if any(t1 <= t0 for t0, t1 in zip(ends[:-1], ends[1:])) or ends[0] <= 0:
            raise ScenarioError(f"reference segment end times must be positive and strictly increasing, got {ends}")
        if any(sp <= 0 for _, sp in segments):
            raise ScenarioError("reference setpoints must be > 0")

    @property
    def t_end(self):
        return self.segments[-1][0]

    def setpoint_at(self, t):
        """Setpoint at time t; segment i covers [end_{i-1}, end_i), the last one is closed."""
        for end, setpoint in self.segments:
            if t < end:
                return setpoint
        return self.segments[-1][1]

    def to_dict(self):
        return {"segments": [list(s) for s in self.segments]}

    @classmethod
    def from_dict(cls, data):
        return cls(segments=tuple(tuple(s) for s in data["segments"]))


@dataclass(frozen=True)
class ScenarioConfig:
    actuation_mode: ActuationMode = ActuationMode.PWM
    uncertainty_level: float = 0.0
    nominal_initial: PlantState = PlantState(3.0, 50.0, 1.0752e-4)
    grid: ForcingGrid = ForcingGrid()
    reference: ReferenceTrajectory = ReferenceTrajectory()
    q_s: float = 1.0
    q_t: float = 1.0
    integrator_step: float = 0.01
    randomize_initial: bool = True
    randomize_q_p_max: bool = True

    def __post_init__(self):
        object.__setattr__(self, "actuation_mode", ActuationMode(self.actuation_mode))
        if not math.isfinite(self.uncertainty_level) or self.uncertainty_level < 0:
            raise ScenarioError(f"uncertainty_level must be >= 0, got {self.uncertainty_level!r}")
        if self.q_s < 0 or self.q_t < 0:
            raise ScenarioError("tracking weights q_s and q_t must be >= 0")
        if not (0 < self.integrator_step <= self.grid.T / 10):
            raise ScenarioError(
                f"integrator_step must lie in (0, T/10] = (0, {self.grid.T / 10}], got {self.integrator_step!r}")
        if not math.isclose(self.reference.t_end, self.grid.t_f):
            raise ScenarioError(
                f"reference ends at {self.reference.t_end} h but the horizon is t_f = {self.grid.t_f} h")

    @property
    def is_pwm(self):
        return self.actuation_mode is ActuationMode.PWM

    def to_dict(self):
        return {
            "actuation_mode": self.actuation_mode.value,
            "uncertainty_level": self.uncertainty_level,
            "nominal_initial": self.nominal_initial.to_dict(),
            "grid": self.grid.to_dict(),
            "reference": self.reference.to_dict(),
            "q_s": self.q_s,
            "q_t": self.q_t,
            "integrator_step": self.integrator_step,
            "randomize_initial": self.randomize_initial,
            "randomize_q_p_max": self.randomize_q_p_max,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        if "nominal_initial" in data:
            data["nominal_initial"] = PlantState.from_dict(data["nominal_initial"])
        if "grid" in data:
            data["grid"] = ForcingGrid.from_dict(data["grid"])
        if "reference" in data:
            data["reference"] = ReferenceTrajectory.from_dict(data["reference"])
        for name in ("uncertainty_level", "q_s", "q_t", "integrator_step"):
            if name in data:
                data[name] = float(data[name])
        return cls(**data)


@dataclass
class PeriodRecord:
    k: int
    observation: np.ndarray
    action: float
    raw_action: float
    reward: float
    state: PlantState


@dataclass
class EpisodeTrace:
    initial_state: PlantState
    q_p_max: float
    records: list = field(default_factory=list)
    # dense rows are (t, b, g, p, I, period); each step contributes its start point
    dense: list = field(default_factory=list)
    period_start_rows: list = field(default_factory=list)
    failure_time: float = None

    @property
    def episode_return(self):
        return sum(r.reward for r in self.records)

    @property
    def actions(self):
        return [r.action for r in self.records]

    def boundary_rows(self):
        """Dense row index of the state x_{k+1} reached at the end of each completed period.

        The env closes the dense trace with that row both at termination and
        when a period fails.
        """
        if not self.dense:
            return []
        return self.period_start_rows[1:] + [len(self.dense) - 1]

    def to_frame(self):
        frame = pd.DataFrame(self.dense, columns=["t", "b", "g", "p", "I", "period"])
        frame["period"] = frame["period"].astype(int)
        frame["action"] = np.nan
        frame["reward"] = np.nan
        for record, row in zip(self.records, self.period_start_rows):
            frame.loc[row, "action"] = record.action
        for record, row in zip(self.records, self.boundary_rows()):
            frame.loc[row, "reward"] = record.reward
        return frame[TRACE_COLUMNS]

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


def _rk4_step(fun, t, y, h):
    k1 = fun(t, y)
    k2 = fun(t + h / 2, y + h / 2 * k1)
    k3 = fun(t + h / 2, y + h / 2 * k2)
    k4 = fun(t + h, y + h * k3)
    return y + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _implicit_finish(fun, jac, y, times, on_step, nonnegative):
    """Integrate through ``times`` with Radau, reporting every time but the last to on_step."""
    sol = solve_ivp(fun, (times[0], times[-1]), y, method="Radau", t_eval=times, jac=jac,
                    rtol=IMPLICIT_RTOL, atol=IMPLICIT_ATOL)
    if not sol.success or not np.all(np.isfinite(sol.y)):
        reached = float(sol.t[-1]) if sol.t.size else times[0]
        raise EpisodeFailure(f"implicit integration failed: {sol.message}", reached)
    states = sol.y.T
    if nonnegative:
        # round-off below zero
        states = np.maximum(states, 0.0)
    if on_step is not None:
        for t, state in zip(times[:-1], states[:-1]):
            on_step(t, state)
    logger.debug("Radau finished [%.4f, %.4f] h", times[0], times[-1])
    return states[-1]


def rk4_integrate(fun, y0, t0, t1, max_step, on_step=None, jac=None, nonnegative=False):
    """Integrate dy/dt = fun(t, y) from t0 to t1 with classical fixed-step RK4.

    The step is shrunk uniformly so the last step lands exactly on t1.
    ``on_step(t, y)`` is called at the start of every step.

    The rest of the interval is handed to scipy's Radau solver, reported on
    the same fixed grid, when ``jac`` shows h * |lambda| above
    ``STIFFNESS_LIMIT`` or, with ``nonnegative``, when a trial step leaves the
    nonnegative orthant. A non-finite state or a failed Radau solve raises
    EpisodeFailure.
    """
    y = np.array(y0, dtype=float)
    span = t1 - t0
    if span <= 0:
        return y
    n_steps = max(1, math.ceil(span / max_step - 1e-9))
    h = span / n_steps
    for i in range(n_steps):
        t = t0 + i * h
        stiff = jac is not None and h * np.max(np.abs(np.linalg.eigvals(jac(t, y)))) > STIFFNESS_LIMIT
        trial = None if stiff else _rk4_step(fun, t, y, h)
        if trial is not None and not np.all(np.isfinite(trial)):
            raise EpisodeFailure("non-finite state during integration", t + h)
        if stiff or (nonnegative and np.any(trial < 0)):
            times = [t0 + j * h for j in range(i, n_steps)] + [t1]
            return _implicit_finish(fun, jac, y, times, on_step, nonnegative)
        if on_step is not None:
            on_step(t, y)
        y = trial
    return y


def sample_episode_randomization(cfg, rng, params=None):
    """Draw the episode's initial state and realized q_p_max.

    Each quantity is normal around its nominal value with relative standard
    deviation ``cfg.uncertainty_level``, resampled until it is above a tiny
    positive floor.
    """
    params = params or ModelParams()
    nominal = cfg.nominal_initial
    level = cfg.uncertainty_level

    def draw(mean, enabled):
        if level == 0 or not enabled:
            return mean
        floor = TRUNCATION_FLOOR * mean
        while True:
            value = rng.normal(mean, level * mean)
            if value > floor:
                return float(value)

    b0 = draw(nominal.b, cfg.randomize_initial)
    g0 = draw(nominal.g, cfg.randomize_initial)
    p0 = draw(nominal.p, cfg.randomize_initial)
    q_p_max = draw(params.q_p_max, cfg.randomize_q_p_max)
    return PlantState(b0, g0, p0), q_p_max


def _period_segments(action, k, cfg, params):
    grid = cfg.grid
    if cfg.is_pwm:
        if not (0.0 <= action <= 1.0):
            raise DomainError(f"duty cycle must lie in [0, 1], got {action!r}")
        plan = PwmPeriodPlan.from_duty(k, action, grid)
        return [(t0, t1, light[0]) for t0, t1, light in switching_segments([plan], params.I_max)]
    if not (0.0 <= action <= params.I_max):
        raise DomainError(f"intensity must lie in [0, {params.I_max}], got {action!r}")
    return [(grid.period_start(k), grid.period_end(k), float(action))]


def simulate_period(x, action, k, cfg, params, record=True):
    """Advance the plant over forcing period k under one action.

    Returns the state at (k+1)T and the dense samples ``(t, b, g, p, I)`` taken
    at the start of every integrator step (an empty list when ``record`` is
    false).
    """
    samples = []
    y = x.as_array()
    for t0, t1, light in _period_segments(action, k, cfg, params):
        q_p = hill_activation(light, params)

        def fun(t, state, q_p=q_p):
            return derivative(state, q_p, params)

        def jac(t, state):
            return jacobian(state, params)

        on_step = None
        if record:
            def on_step(t, state, light=light):
                samples.append((t, state[0], state[1], state[2], light))

        y = rk4_integrate(fun, y, t0, t1, cfg.integrator_step, on_step, jac=jac, nonnegative=True)
    return PlantState.from_array(y), samples


def integrate_period_activation(D, k, grid, params, step):
    """Period average of q_p(I(t)) for duty cycle D, integrated with rk4_integrate."""
    plan = PwmPeriodPlan.from_duty(k, D, grid)
    total = np.zeros(1)
    for t0, t1, light in switching_segments([plan], params.I_max):
        rate = np.array([hill_activation(light[0], params)])
        total = rk4_integrate(lambda t, y, rate=rate: rate, total, t0, t1, step)
    return float(total[0]) / grid.T


def stage_reward(x_next, k, cfg):
    """Reward r_{k+1} collected once period k has been applied."""
    grid = cfg.grid
    if not (0 <= k < grid.n_T):
        raise ScenarioError(f"period index must be in [0, {grid.n_T}), got {k!r}")
    setpoint = cfg.reference.setpoint_at(grid.period_end(k))
    weight = cfg.q_t if k + 1 == grid.n_T else cfg.q_s
    return -weight * (x_next.b - setpoint) ** 2


def _scaled_state(x, params):
    return [x.b / BIOMASS_SCALE, x.g / params.g_in, x.p / LYSINE_SCALE]


def time_embedding(k, grid):
    """Process-time embedding e_k = 2k/(n_T - 1) - 1, clipped to [-1, 1]."""
    if grid.n_T == 1:
        return -1.0
    return min(1.0, 2.0 * k / (grid.n_T - 1) - 1.0)


def build_observation(states, actions, k, grid, params):
    """Policy input z_k = [x_k, D_{k-1}, x_{k-1}, D_{k-2}, e_k].

    ``states`` holds x_0 .. x_k and ``actions`` the normalized applied actions
    D_0 .. D_{k-1}. Missing history is padded with x_0 and zero duty.
    """
    current = states[k]
    previous = states[k - 1] if k >= 1 else states[0]
    d1 = actions[k - 1] if k >= 1 else 0.0
    d2 = actions[k - 2] if k >= 2 else 0.0
    return np.array(
        _scaled_state(current, params) + [d1] + _scaled_state(previous, params) + [d2, time_embedding(k, grid)],
        dtype=float,
    )


def boundary_tracking_cost(trace, cfg):
    """Tracking cost sampled at period boundaries from the dense trace."""
    rows = trace.boundary_rows()
    if not rows:
        raise ScenarioError("trace has no dense samples")
    grid = cfg.grid
    cost = 0.0
    for k, row in enumerate(rows):
        b = trace.dense[row][1]
        weight = cfg.q_t if k + 1 == grid.n_T else cfg.q_s
        cost += weight * (b - cfg.reference.setpoint_at(grid.period_end(k))) ** 2
    return cost


def continuous_tracking_cost(trace, cfg):
    """Time-integrated stage cost over the dense trace plus the terminal cost."""
    if not trace.dense:
        raise ScenarioError("trace has no dense samples")
    t = np.array([row[0] for row in trace.dense])
    b = np.array([row[1] for row in trace.dense])
    ref = np.array([cfg.reference.setpoint_at(ti) for ti in t])
    stage = trapezoid(cfg.q_s * (b - ref) ** 2, t)
    return float(stage + cfg.q_t * (b[-1] - cfg.reference.setpoint_at(cfg.grid.t_f)) ** 2)


class OptogeneticChemostatEnv(gym.Env):
    """Gymnasium environment: one step applies one forcing period.

    Actions are duty cycles in [0, 1] (PWM) or intensities in [0, I_max]
    (INTENSITY). Observations are the 9-dimensional policy input z_k.
    """

    metadata = {"render_modes": []}

    def __init__(self, scenario, params=None, record_dense=True):
        super().__init__()
        self.scenario = scenario
        self.params = params or ModelParams()
        self.record_dense = record_dense
        high = 1.0 if scenario.is_pwm else self.params.I_max
        self.action_space = spaces.Box(0.0, high, shape=(1,), dtype=np.float64)
        self.observation_space = spaces.Box(-np.inf, np.inf, shape=(OBSERVATION_DIM,), dtype=np.float64)
        self.episode_params = None
        self._trace = None

    @property
    def trace(self):
        return self._trace

    def _close_dense_trace(self, x, k):
        # end-of-period row for the state reached after period k
        trace = self._trace
        if self.record_dense and trace.dense:
            trace.dense.append((self.scenario.grid.period_end(k), x.b, x.g, x.p, trace.dense[-1][4], k))

    def _observation(self):
        return build_observation(self._states, self._normalized, self._k, self.scenario.grid, self.params)

    def reset(self, *, seed=None, options=None):
        super().reset(seed=seed)
        x0, q_p_max = sample_episode_randomization(self.scenario, self.np_random, self.params)
        self.episode_params = self.params.with_q_p_max(q_p_max)
        self._k = 0
        self._states = [x0]
        self._normalized = []
        self._trace = EpisodeTrace(initial_state=x0, q_p_max=q_p_max)
        obs = self._observation()
        return obs, {"state": x0, "q_p_max": q_p_max}

    def step(self, action, raw_action=None):
        grid = self.scenario.grid
        if self._trace is None or self._k >= grid.n_T or self._trace.failure_time is not None:
            raise ScenarioError("episode is over or was never started; call reset()")
        value = float(np.asarray(action, dtype=float).reshape(-1)[0])
        k = self._k
        x = self._states[-1]
        obs = self._observation()
        try:
            x_next, samples = simulate_period(x, value, k, self.scenario, self.episode_params, self.record_dense)
        except EpisodeFailure as exc:
            logger.warning("Episode failed in period %d: %s", k, exc)
            self._trace.failure_time = exc.time
            if k > 0:
                self._close_dense_trace(x, k - 1)
            raise
        reward = stage_reward(x_next, k, self.scenario)

        trace = self._trace
        if self.record_dense:
            trace.period_start_rows.append(len(trace.dense))
            trace.dense.extend(sample + (k,) for sample in samples)
        trace.records.append(PeriodRecord(
            k=k, observation=obs, action=value,
            raw_action=value if raw_action is None else float(raw_action),
            reward=reward, state=x_next,
        ))
        self._states.append(x_next)
        self._normalized.append(value if self.scenario.is_pwm else value / self.params.I_max)
        self._k += 1

        terminated = self._k == grid.n_T
        if terminated:
            self._close_dense_trace(x_next, k)
        return self._observation(), reward, terminated, False, {"state": x_next, "t": grid.period_end(k)}
