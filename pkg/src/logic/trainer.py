"""Monte Carlo policy-gradient training with a normalized return baseline."""
import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from logic.env import EpisodeFailure, OptogeneticChemostatEnv, continuous_tracking_cost
from logic.model import ModelParams
from logic.policy import (
    ActionSample,
    PolicyNumericalError,
    forward,
    grad_log_prob,
    log_prob,
    sample_action,
)

logger = logging.getLogger(__name__)

EPOCH_COLUMNS = ["epoch", "mean_return", "sd_return", "best_so_far"]
SUMMARY_COLUMNS = ["period", "t", "b_mean", "b_sd", "action_mean", "action_sd", "reference"]
METRICS_COLUMNS = ["n_episodes", "n_failed", "mean_return", "sd_return", "deterministic_return", "continuous_cost"]
# stream counter reserved for evaluation episodes
EVAL_STREAM = 2**32 - 1


class TrainingAborted(RuntimeError):
    """Raised when the policy gradient or the network output stops being finite."""

    def __init__(self, message, epoch, param_norm):
        super().__init__(f"{message} (epoch {epoch}, parameter norm {param_norm:.6g})")
        self.epoch = epoch
        self.param_norm = param_norm


@dataclass(frozen=True)
class TrainConfig:
    n_epochs: int = 1000
    n_mc: int = 100
    learning_rate: float = 0.001
    patience: int = 100
    epsilon_baseline: float = 1e-8
    master_seed: int = 0
    optimizer: str = "sgd"
    failure_return: float = -1e6
    log_every: int = 10

    def __post_init__(self):
        for name in ("n_epochs", "patience", "log_every"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ValueError(f"{name} must be an integer >= 1, got {getattr(self, name)!r}")
        if int(self.n_mc) != self.n_mc or self.n_mc < 2:
            raise ValueError(f"n_mc must be an integer >= 2 for the normalized baseline, got {self.n_mc!r}")
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate!r}")
        if not self.epsilon_baseline > 0:
            raise ValueError(f"epsilon_baseline must be > 0, got {self.epsilon_baseline!r}")
        if int(self.master_seed) != self.master_seed or self.master_seed < 0:
            raise ValueError(f"master_seed must be a non-negative integer, got {self.master_seed!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not (math.isfinite(self.failure_return) and self.failure_return < 0):
            raise ValueError(f"failure_return must be a finite negative number, got {self.failure_return!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training field(s): {', '.join(sorted(unknown))}")
        return cls(**data)


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_return: float
    sd_return: float
    best_so_far: bool
    n_failed: int = 0

    def to_row(self):
        return {
            "epoch": self.epoch,
            "mean_return": self.mean_return,
            "sd_return": self.sd_return,
            "best_so_far": int(self.best_so_far),
        }


@dataclass
class RolloutResult:
    trace: object
    observations: list
    raw_actions: list
    episode_return: float
    failed: bool = False
    failure_time: float = None


@dataclass
class TrainResult:
    best_params: object
    history: list
    best_epoch: int
    best_mean_return: float
    stopped_early: bool

    def history_frame(self):
        return pd.DataFrame([s.to_row() for s in self.history], columns=EPOCH_COLUMNS)


def rollout_streams(master_seed, epoch, index):
    """Environment seed and policy generator for one rollout.

    Both derive from SeedSequence([master_seed, epoch, index]), so any
    rollout can be replayed on its own regardless of execution order.
    """
    env_seq, policy_seq = np.random.SeedSequence([master_seed, epoch, index]).spawn(2)
    return int(env_seq.generate_state(1)[0]), np.random.default_rng(policy_seq)


def failure_penalty(failure_return, failure_time, t_f):
    """Return assigned to a failed episode.

    A failure at t_f scores ``failure_return``; earlier failures scale it up
    linearly to twice that at t = 0.
    """
    remaining = min(max((t_f - failure_time) / t_f, 0.0), 1.0)
    return failure_return * (1.0 + remaining)


def rollout(theta, scenario, params, env_seed, policy_rng, deterministic=False,
            record_dense=False, failure_return=-1e6):
    """Run one episode, sampling duty cycles (or intensities) from the policy."""
    env = OptogeneticChemostatEnv(scenario, params, record_dense=record_dense)
    obs, _ = env.reset(seed=env_seed)
    scale = 1.0 if scenario.is_pwm else env.params.I_max
    observations, raws = [], []
    terminated = False
    try:
        while not terminated:
            mean, std = forward(obs, theta)
            if deterministic:
                sample = ActionSample(raw=mean, applied=mean, log_prob=log_prob(mean, mean, std), mean=mean, std=std)
            else:
                sample = sample_action(mean, std, policy_rng)
            observations.append(obs)
            raws.append(sample.raw)
            obs, _, terminated, _, _ = env.step(sample.applied * scale, raw_action=sample.raw)
    except EpisodeFailure as exc:
        penalty = failure_penalty(failure_return, exc.time, scenario.grid.t_f)
        return RolloutResult(env.trace, observations, raws, penalty, failed=True, failure_time=exc.time)
    return RolloutResult(env.trace, observations, raws, env.trace.episode_return)


def population_sd(values):
    """Population standard deviation; exactly 0 when all values coincide."""
    values = np.asarray(values, dtype=float)
    if np.all(values == values[0]):
        return 0.0
    return float(np.std(values))


def normalized_advantages(returns, epsilon):
    """(J - mean) / (sd + epsilon) over the batch, exactly zero for a constant batch."""
    returns = np.asarray(returns, dtype=float)
    if np.all(returns == returns[0]):
        return np.zeros_like(returns)
    return (returns - returns.mean()) / (population_sd(returns) + epsilon)


def policy_gradient(returns, scores, epsilon):
    """Average of normalized advantage times summed score over the batch.

    ``scores`` is an (n_mc, n_params) array whose rows are the per-episode
    sums of grad log pi.
    """
    scores = np.asarray(scores, dtype=float)
    if len(returns) < 2:
        raise ValueError("the normalized baseline needs at least two rollouts")
    advantages = normalized_advantages(returns, epsilon)
    return advantages @ scores / len(returns)


def episode_score(result, theta):
    """Sum over periods of grad log pi(raw action | z_k, theta) as a flat vector."""
    score = np.zeros(theta.size)
    for z, raw in zip(result.observations, result.raw_actions):
        score += grad_log_prob(z, raw, theta).flatten()
    return score


def estimate_gradient(batch, theta, epsilon):
    """Policy-gradient estimate from a batch of rollouts, shaped like theta."""
    returns = np.array([r.episode_return for r in batch])
    scores = np.zeros((len(batch), theta.size))
    if len(batch) >= 2:
        # rollouts with zero advantage contribute nothing; skip their backward passes
        for j, advantage in enumerate(normalized_advantages(returns, epsilon)):
            if advantage != 0:
                scores[j] = episode_score(batch[j], theta)
    return theta.unflatten(policy_gradient(returns, scores, epsilon))


def apply_update(theta, grad, learning_rate):
    """Gradient ascent step theta + alpha * grad."""
    return theta.axpy(learning_rate, grad)


class AdamAscent:
    """Adaptive-moment ascent on the flattened parameters."""

    def __init__(self, learning_rate, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, theta, grad):
        g = grad.flatten()
        if self.m is None:
            self.m = np.zeros_like(g)
            self.v = np.zeros_like(g)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * g
        self.v = self.beta2 * self.v + (1 - self.beta2) * g ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta.unflatten(theta.flatten() + self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps))


def _collect_batch(theta, scenario, params, cfg, epoch):
    batch = []
    for j in range(cfg.n_mc):
        env_seed, policy_rng = rollout_streams(cfg.master_seed, epoch, j)
        result = rollout(theta, scenario, params, env_seed, policy_rng, failure_return=cfg.failure_return)
        if result.failed:
            logger.warning("Rollout %d of epoch %d failed at t=%.4g h; assigned return %g",
                           j, epoch, result.failure_time, result.episode_return)
        batch.append(result)
    return batch


def train(cfg, scenario, theta0, params=None, on_epoch=None, on_best=None):
    """Train the policy and return the parameters of the best epoch.

    ``on_epoch(stats)`` runs after every epoch and ``on_best(stats, theta)``
    whenever the epoch mean return beats the running best.
    """
    params = params or ModelParams()
    theta = theta0.copy()
    optimizer = AdamAscent(cfg.learning_rate) if cfg.optimizer == "adam" else None
    history = []
    best_mean, best_theta, best_epoch = -math.inf, theta.copy(), 0
    stale = 0
    stopped_early = False
    logger.info("Training %s policy: %d epochs x %d rollouts, lr=%g, uncertainty=%g",
                scenario.actuation_mode.value, cfg.n_epochs, cfg.n_mc, cfg.learning_rate,
                scenario.uncertainty_level)

    for epoch in range(cfg.n_epochs):
        try:
            batch = _collect_batch(theta, scenario, params, cfg, epoch)
        except PolicyNumericalError as e:
            raise TrainingAborted(str(e), epoch, theta.norm()) from e
        returns = np.array([r.episode_return for r in batch])
        mean_return = float(returns.mean())
        improved = mean_return > best_mean
        if improved:
            best_mean, best_theta, best_epoch = mean_return, theta.copy(), epoch
            stale = 0
        else:
            stale += 1

        stats = EpochStats(epoch, mean_return, population_sd(returns), improved,
                           n_failed=sum(r.failed for r in batch))
        history.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
        if improved:
            if on_best is not None:
                on_best(stats, best_theta)
            logger.debug("New best at epoch %d: mean return %.6g", epoch, mean_return)
        if epoch % cfg.log_every == 0:
            logger.info("Epoch %d: mean return %.6g, sd %.6g, best %.6g (epoch %d)",
                        epoch, mean_return, stats.sd_return, best_mean, best_epoch)

        if stale >= cfg.patience:
            logger.info("Early stop at epoch %d: no improvement for %d epochs", epoch, cfg.patience)
            stopped_early = True
            break
        if epoch == cfg.n_epochs - 1:
            break

        grad = estimate_gradient(batch, theta, cfg.epsilon_baseline)
        if not grad.is_finite():
            raise TrainingAborted("non-finite policy gradient", epoch, theta.norm())
        theta = optimizer.step(theta, grad) if optimizer else apply_update(theta, grad, cfg.learning_rate)

    logger.info("Best mean return %.6g at epoch %d", best_mean, best_epoch)
    return TrainResult(best_theta, history, best_epoch, best_mean, stopped_early)


@dataclass
class EvaluationResult:
    scenario: object
    returns: np.ndarray
    biomass: np.ndarray
    actions: np.ndarray
    traces: list = field(default_factory=list)
    deterministic_trace: object = None
    deterministic_return: float = None
    continuous_cost: float = None
    n_failed: int = 0

    @property
    def mean_return(self):
        return float(np.mean(self.returns))

    @property
    def sd_return(self):
        return population_sd(self.returns)

    def metrics_frame(self):
        """One-row table of the episode statistics; continuous_cost is empty if the mean run failed."""
        return pd.DataFrame([{
            "n_episodes": len(self.returns),
            "n_failed": self.n_failed,
            "mean_return": self.mean_return,
            "sd_return": self.sd_return,
            "deterministic_return": self.deterministic_return,
            "continuous_cost": self.continuous_cost,
        }], columns=METRICS_COLUMNS)

    def summary_frame(self):
        grid = self.scenario.grid
        rows = []
        for k in range(grid.n_T):
            t = grid.period_end(k)
            rows.append({
                "period": k,
                "t": t,
                "b_mean": float(np.mean(self.biomass[:, k])),
                "b_sd": population_sd(self.biomass[:, k]),
                "action_mean": float(np.mean(self.actions[:, k])),
                "action_sd": population_sd(self.actions[:, k]),
                "reference": self.scenario.reference.setpoint_at(t),
            })
        return pd.DataFrame(rows, columns=SUMMARY_COLUMNS)


def evaluate(theta, scenario, n_eval, seed, params=None, deterministic=False):
    """Run n_eval evaluation episodes plus one deterministic-mean episode.

    With ``deterministic`` the n_eval episodes also apply the mean action;
    the plant is still randomized per episode.
    """
    if n_eval < 1:
        raise ValueError(f"n_eval must be >= 1, got {n_eval!r}")
    params = params or ModelParams()
    returns, biomass, actions, traces = [], [], [], []
    n_failed = 0
    for i in range(n_eval):
        env_seed, policy_rng = rollout_streams(seed, EVAL_STREAM, i)
        result = rollout(theta, scenario, params, env_seed, policy_rng,
                         deterministic=deterministic, record_dense=True)
        if result.failed:
            n_failed += 1
            logger.warning("Evaluation episode %d failed at t=%.4g h; excluded from the summary", i, result.failure_time)
            continue
        returns.append(result.episode_return)
        biomass.append([r.state.b for r in result.trace.records])
        actions.append(result.trace.actions)
        traces.append(result.trace)
    if not returns:
        raise EpisodeFailure("every evaluation episode failed", 0.0)

    env_seed, policy_rng = rollout_streams(seed, EVAL_STREAM, n_eval)
    mean_run = rollout(theta, scenario, params, env_seed, policy_rng, deterministic=True, record_dense=True)
    result = EvaluationResult(
        scenario=scenario,
        returns=np.array(returns),
        biomass=np.array(biomass),
        actions=np.array(actions),
        traces=traces,
        deterministic_trace=mean_run.trace,
        deterministic_return=mean_run.episode_return,
        continuous_cost=None if mean_run.failed else continuous_tracking_cost(mean_run.trace, scenario),
        n_failed=n_failed,
    )
    logger.info("Evaluation over %d episodes: mean return %.6g, sd %.6g; deterministic return %.6g",
                len(returns), result.mean_return, result.sd_return, result.deterministic_return)
    return result
