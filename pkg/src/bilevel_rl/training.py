"""Behavioural-cloning pre-training and Reinforce with a batch-mean baseline."""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .environments.rollout import Mode, ObsStats, episode_rng, rollout_batch, simulate
from .errors import ContractError, InputError
from .optim import AdamState, Direction, LrSchedule, adam_step, mse_loss, schedule_lr
from .policy_net import forward, grad_log_prob_batch, grad_mean_loss

log = logging.getLogger(__name__)


# -- PD demonstrator --------------------------------------------------------------


@dataclass
class PdController:
    """``u = offset + kp * e + kd * (e - e_prev) / dt`` clipped to the actuator range.

    ``offset`` defaults to 0 (a bias-free PD).
    """

    kp: float
    kd: float
    setpoint: float = 0.0
    low: float = -np.inf
    high: float = np.inf
    offset: float = 0.0

    def __post_init__(self):
        if not (np.isfinite(self.kp) and np.isfinite(self.kd)):
            raise ContractError("PD gains must be finite")


def pd_act(ctrl, e, e_prev, dt):
    if not dt > 0:
        raise ContractError("dt must be positive")
    u = ctrl.offset + ctrl.kp * e + ctrl.kd * (e - e_prev) / dt
    return float(min(max(u, ctrl.low), ctrl.high))


class TankPd:
    """PD on the measured volume error ``V~ - V_SP`` driving the outlet valve."""

    def __init__(self, kp=1.0, kd=0.05, dt=0.01):
        self.ctrl = PdController(kp, kd, low=0.0, high=1.0)
        self.dt = dt

    def __call__(self, obs, t):
        v_sp = obs[1]
        return pd_act(self.ctrl, obs[2] - v_sp, obs[3] - v_sp, self.dt)


class CstrPd:
    """PD on reactor temperature driving the jacket temperature.

    The CSTR observation carries only the current temperature, so the
    previous reading is remembered between calls.
    """

    def __init__(self, kp, kd, t_target, offset, dt=1.0, low=200.0, high=500.0):
        self.ctrl = PdController(kp, kd, setpoint=t_target, low=low, high=high, offset=offset)
        self.dt = dt
        self._prev = None

    def reset(self):
        self._prev = None

    def __call__(self, obs, t):
        e = self.ctrl.setpoint - obs[2]
        e_prev = e if self._prev is None else self._prev
        self._prev = e
        return pd_act(self.ctrl, e, e_prev, self.dt)


def collect_demos(env_factory, controller, n_episodes, seed):
    """State/action pairs from running ``controller`` on sampled designs."""
    xs, us = [], []
    for k in range(n_episodes):
        env = env_factory(episode_rng(seed, k, 1))
        traj = simulate(env, controller, episode_rng(seed, k, 2))
        xs.append(traj.observations)
        us.append(traj.applied_actions)
    return np.concatenate(xs), np.concatenate(us)


# -- pre-training -------------------------------------------------------------------


def pretrain(policy, demos, n_iter=500, lr=1e-3, batch_size=None, seed=0):
    """Fit the policy mean to demonstrated actions by MSE + Adam.

    Sets and freezes the policy's observation normalisation from the demo
    states.  Returns the per-iteration loss curve.
    """
    X, U = demos
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float).reshape(len(X), policy.n_controls)
    if len(X) == 0:
        raise ContractError("pre-training needs at least one demonstration pair")
    stats = ObsStats.from_data(X)
    policy.obs_mean = stats.mean
    policy.obs_std = stats.std
    Xn = policy.normalize(X)
    state = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    losses = np.zeros(n_iter + 1)
    for it in range(n_iter + 1):
        if batch_size and batch_size < len(Xn):
            idx = rng.choice(len(Xn), size=batch_size, replace=False)
            xb, ub = Xn[idx], U[idx]
        else:
            xb, ub = Xn, U
        mean = forward(policy, xb).mean
        loss, g = mse_loss(mean, ub)
        losses[it] = loss
        if it == n_iter:
            break
        adam_step(state, policy.theta, grad_mean_loss(policy, xb, g), Direction.DESCEND)
    return losses


# -- Reinforce ----------------------------------------------------------------------


def compute_returns(rewards, gamma=1.0):
    """Returns-to-go ``G_t = R_{t+1} + gamma G_{t+1}`` and the episode return ``G_0``."""
    if not 0.0 <= gamma <= 1.0:
        raise ContractError("gamma must lie in [0, 1]")
    rewards = np.asarray(rewards, dtype=float)
    g = np.zeros_like(rewards)
    acc = 0.0
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        g[t] = acc
    return g, (float(g[0]) if len(g) else 0.0)


def policy_gradient(policy, observations, raw_actions, returns, baseline=None):
    """``(1/K) sum_k (J_k - b) sum_t grad log pi(u_t^k | x_t^k)``.

    ``observations``/``raw_actions`` are stacked per episode (K, n_T, .) and
    un-normalised.  Returns ``(gradient, baseline)``.
    """
    returns = np.asarray(returns, dtype=float)
    n_ep = len(returns)
    if n_ep < 1:
        raise ContractError("need at least one trajectory")
    b = float(returns.mean()) if baseline is None else float(baseline)
    adv = (returns - b) / n_ep
    n_t = observations.shape[1]
    X = policy.normalize(observations.reshape(n_ep * n_t, -1))
    U = raw_actions.reshape(n_ep * n_t, -1)
    w = np.repeat(adv, n_t)
    return grad_log_prob_batch(policy, X, U, w), b


def reinforce_update(policy, batch, adam, lr, gamma=1.0, baseline=None):
    """One Adam ascent step on the Reinforce estimate from ``batch``.

    Returns ``(gradient, baseline, applied)``; a non-finite estimate is
    skipped and logged.
    """
    returns = batch.returns(gamma)
    grad, b = policy_gradient(policy, batch.observations, batch.raw_actions, returns, baseline)
    if not np.all(np.isfinite(grad)):
        log.warning("non-finite policy-gradient estimate; update skipped")
        return grad, b, False
    adam.lr = lr
    try:
        adam_step(adam, policy.theta, grad, Direction.ASCEND)
    except InputError:
        log.warning("update rejected by optimizer")
        return grad, b, False
    return grad, b, True


@dataclass
class TrainConfig:
    n_epochs: int = 1000
    n_episodes: int = 20
    gamma: float = 1.0
    alpha0: float = 1e-3
    decay: float = 0.99
    start_epoch: int = None
    seed: int = 0
    noise_pct: float = 0.0

    def schedule(self):
        start = self.n_epochs // 2 if self.start_epoch is None else self.start_epoch
        return LrSchedule(self.alpha0, self.decay, start)


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    mean_return: list = field(default_factory=list)
    baseline: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    wall_clock: float = 0.0

    def rows(self):
        return list(zip(self.epochs, self.mean_return, self.baseline, self.lr, self.grad_norm))

    header = ("epoch", "mean_return", "baseline", "lr", "grad_norm")

    def summary(self):
        n = len(self.epochs)
        tail = self.mean_return[-max(1, n // 10):] if n else []
        return {
            "epochs": n,
            "first_mean_return": self.mean_return[0] if n else None,
            "final_mean_return": self.mean_return[-1] if n else None,
            "tail_mean_return": float(np.mean(tail)) if n else None,
            "final_lr": self.lr[-1] if n else None,
        }


def train(env_factory, policy, config, callback=None):
    """Reinforce with baseline and decayed learning rate.

    ``env_factory(rng)`` builds the environment for one episode, sampling a
    fresh design from ``rng``.  Episode ``k`` of epoch ``m`` uses generators
    keyed by ``(seed, m, k)``, so results do not depend on worker count.
    """
    sched = config.schedule()
    adam = AdamState(lr=sched.alpha0)
    report = TrainReport()
    t0 = time.perf_counter()
    for m in range(config.n_epochs):
        lr = schedule_lr(sched, m)
        envs = [env_factory(episode_rng(config.seed, m, k, 0)) for k in range(config.n_episodes)]
        rngs = [episode_rng(config.seed, m, k, 1) for k in range(config.n_episodes)]
        batch = rollout_batch(envs, policy, Mode.STOCHASTIC, rngs)
        grad, b, _ = reinforce_update(policy, batch, adam, lr, config.gamma)
        report.epochs.append(m)
        report.mean_return.append(float(batch.returns(config.gamma).mean()))
        report.baseline.append(b)
        report.lr.append(lr)
        report.grad_norm.append(float(np.linalg.norm(grad)))
        if callback is not None:
            callback(m, policy, report)
    report.wall_clock = time.perf_counter() - t0
    return policy, report
