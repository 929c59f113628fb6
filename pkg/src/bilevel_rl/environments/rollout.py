"""Episode rollouts for compiled policies and plain Python controllers."""

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .. import _accel
from ..errors import ContractError, IntegrationError
from ..policy_net import PolicyNetwork
from .cstr import CSTR_FREQ, CstrEnv, cstr_batch_kernel, cstr_batch_numpy
from .tank import TANK_FREQ, TankEnv, tank_batch_kernel, tank_batch_numpy

log = logging.getLogger(__name__)


class Mode(str, Enum):
    STOCHASTIC = "stochastic"
    MEAN_ACTION = "mean_action"


@dataclass
class Trajectory:
    """One episode.  ``states`` has ``n_T + 1`` rows, everything else ``n_T``."""

    states: np.ndarray
    observations: np.ndarray
    raw_actions: np.ndarray
    applied_actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    gamma: float = 1.0
    disturbances: np.ndarray = None
    info: dict = field(default_factory=dict)

    @property
    def total_return(self):
        return float(discounted_sum(self.rewards, self.gamma))

    def __len__(self):
        return len(self.rewards)

    def table(self, env):
        """``(header, rows)`` for a CSV dump: t, states, observations, applied controls, reward.

        The final row carries only the terminal state.
        """
        header = (["t"] + list(env.state_names) + [f"obs_{o}" for o in env.obs_names]
                  + list(env.control_names) + ["reward"])
        n_t = len(self.rewards)
        blank = [""] * (len(header) - 1 - len(env.state_names))
        rows = []
        for t in range(n_t + 1):
            row = [t * env.grid.dt] + [float(v) for v in self.states[t]]
            if t < n_t:
                row += [float(v) for v in self.observations[t]]
                row += [float(v) for v in self.applied_actions[t]] + [float(self.rewards[t])]
            else:
                row += blank
            rows.append(row)
        return header, rows


def discounted_sum(rewards, gamma):
    rewards = np.asarray(rewards, dtype=float)
    if gamma == 1.0:
        return rewards.sum(axis=-1)
    return rewards @ (gamma ** np.arange(rewards.shape[-1]))


@dataclass
class BatchResult:
    """Stacked rollouts of one environment kind (episode axis first)."""

    states: np.ndarray
    observations: np.ndarray
    raw_actions: np.ndarray
    applied_actions: np.ndarray
    rewards: np.ndarray
    log_probs: np.ndarray
    disturbances: np.ndarray
    status: np.ndarray
    floors: np.ndarray

    def returns(self, gamma=1.0):
        return discounted_sum(self.rewards, gamma)

    def trajectory(self, k, gamma=1.0):
        return Trajectory(
            states=self.states[k],
            observations=self.observations[k],
            raw_actions=self.raw_actions[k],
            applied_actions=self.applied_actions[k],
            rewards=self.rewards[k],
            log_probs=self.log_probs[k],
            gamma=gamma,
            disturbances=None if self.disturbances is None else self.disturbances[k],
        )


def episode_rng(seed, *keys):
    """Independent generator for an episode keyed by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *(int(k) for k in keys)]))


def _check_compatible(envs, policy):
    kinds = {type(e) for e in envs}
    if len(kinds) != 1:
        raise ContractError("a batch must hold a single environment type")
    env = envs[0]
    if policy.input_dim != env.obs_dim or policy.n_controls != env.n_controls:
        raise ContractError(
            f"policy ({policy.input_dim} in, {policy.n_controls} out) does not fit "
            f"{env.kind} environment ({env.obs_dim} obs, {env.n_controls} controls)"
        )
    grids = {(e.grid, e.noise_pct) for e in envs}
    if len(grids) != 1:
        raise ContractError("a batch must share one time grid and noise level")
    if isinstance(env, CstrEnv) and len({e.params for e in envs}) != 1:
        raise ContractError("a CSTR batch must share one parameter set")


def rollout_batch(envs, policy, mode=Mode.STOCHASTIC, rngs=None, backend=None):
    """Roll out ``policy`` once in each environment.

    ``rngs`` supplies one generator per episode (``None`` for noiseless,
    draw-free episodes).  Measurement noise is drawn first, then action noise,
    so Python controllers run through ``env.step`` see identical measurement
    noise for the same generator seed.
    """
    envs = list(envs)
    if not envs:
        raise ContractError("empty batch")
    _check_compatible(envs, policy)
    mode = Mode(mode)
    backend = backend or ("numba" if _accel.USE_NUMBA else "numpy")
    env0 = envs[0]
    grid = env0.grid
    n_ep, n_t, n_c = len(envs), grid.n_steps, policy.n_controls
    if rngs is None:
        rngs = [None] * n_ep
    xi_meas = np.zeros((n_ep, n_t + 1, env0.n_meas))
    xi_act = np.zeros((n_ep, n_t, n_c))
    for k, rng in enumerate(rngs):
        if rng is None:
            continue
        xi_meas[k] = env0.draw_meas_noise(rng)
        xi_act[k] = rng.standard_normal((n_t, n_c))
    if mode is Mode.STOCHASTIC and any(r is None for r in rngs):
        raise ContractError("stochastic rollouts need a generator per episode")

    designs = np.stack([e.design_row() for e in envs])
    out = BatchResult(
        states=np.zeros((n_ep, n_t + 1, env0.state_dim)),
        observations=np.zeros((n_ep, n_t, env0.obs_dim)),
        raw_actions=np.zeros((n_ep, n_t, n_c)),
        applied_actions=np.zeros((n_ep, n_t, n_c)),
        rewards=np.zeros((n_ep, n_t)),
        log_probs=np.zeros((n_ep, n_t)),
        disturbances=None,
        status=np.full(n_ep, -1, dtype=np.int64),
        floors=np.zeros(n_ep, dtype=np.int64),
    )
    tail = (out.states, out.observations, out.raw_actions, out.applied_actions, out.rewards,
            out.log_probs, out.status, out.floors)
    noise_frac = env0.noise_pct / 100.0
    stochastic = mode is Mode.STOCHASTIC
    common = (grid.dt, n_t, grid.substeps)
    if isinstance(env0, TankEnv):
        args = (designs, *common, TANK_FREQ, noise_frac, stochastic, xi_act, xi_meas, *tail)
        if backend == "numba":
            _accel.configure_threads()
            tank_batch_kernel(*policy.kernel_args(), *args)
        else:
            tank_batch_numpy(policy, *args)
    elif isinstance(env0, CstrEnv):
        out.disturbances = np.zeros((n_ep, n_t + 1, 2))
        sched = np.stack([e.design.schedule(n_t) for e in envs])
        pp = env0.params.as_array()
        args = (designs, sched, pp, env0.params.t_max, *common, CSTR_FREQ, noise_frac, stochastic,
                xi_act, xi_meas, *tail, out.disturbances)
        if backend == "numba":
            _accel.configure_threads()
            cstr_batch_kernel(*policy.kernel_args(), *args)
        else:
            cstr_batch_numpy(policy, *args)
    else:
        raise ContractError(f"unsupported environment {type(env0).__name__}")

    if np.any(out.status >= 0):
        k = int(np.argmax(out.status >= 0))
        raise IntegrationError(int(out.status[k]), f"non-finite state in episode {k}")
    if np.any(out.floors):
        log.info("state floored at 0 in %d steps across the batch", int(out.floors.sum()))
    return out


def rollout(env, policy, mode=Mode.STOCHASTIC, seed=None, gamma=1.0, backend=None):
    """Single episode of a :class:`PolicyNetwork` or a Python controller.

    Python controllers are callables ``controller(obs, t) -> control`` and
    may expose ``reset()``; they always act deterministically.
    """
    rng = None if seed is None else episode_rng(seed)
    if isinstance(policy, PolicyNetwork):
        if Mode(mode) is Mode.STOCHASTIC and rng is None:
            rng = episode_rng(0)
        batch = rollout_batch([env], policy, mode, [rng], backend=backend)
        return batch.trajectory(0, gamma)
    return simulate(env, policy, rng, gamma)


def simulate(env, controller, rng=None, gamma=1.0):
    """Drive ``env`` with a plain Python controller."""
    if hasattr(controller, "reset"):
        controller.reset()
    n_t = env.grid.n_steps
    obs = env.reset(rng)
    states = np.zeros((n_t + 1, env.state_dim))
    states[0] = env.state
    observations = np.zeros((n_t, env.obs_dim))
    actions = np.zeros((n_t, env.n_controls))
    applied = np.zeros((n_t, env.n_controls))
    rewards = np.zeros(n_t)
    dist = []
    for t in range(n_t):
        observations[t] = obs
        u = np.atleast_1d(np.asarray(controller(obs, t), dtype=float))
        actions[t] = u
        applied[t] = np.clip(u, env.action_low, env.action_high)
        res = env.step(applied[t])
        states[t + 1] = res.next_state
        rewards[t] = res.reward
        dist.append([v for k, v in res.info.items() if k != "floored"])
        obs = res.observation
    return Trajectory(
        states=states,
        observations=observations,
        raw_actions=actions,
        applied_actions=applied,
        rewards=rewards,
        log_probs=np.zeros(n_t),
        gamma=gamma,
        disturbances=np.asarray(dist, dtype=float),
    )


@dataclass
class ObsStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def from_data(cls, X):
        X = np.asarray(X, dtype=float)
        return cls(X.mean(axis=0), np.maximum(X.std(axis=0), 1e-8))


def normalize_obs(stats, obs):
    return (np.asarray(obs, dtype=float) - stats.mean) / np.maximum(stats.std, 1e-8)


def denormalize_obs(stats, z):
    return np.asarray(z, dtype=float) * np.maximum(stats.std, 1e-8) + stats.mean
