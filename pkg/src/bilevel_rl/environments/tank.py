"""Buffer tank with sinusoidal inflow and a proportional outlet valve.

    dV/dtau = F_in(tau) - a_t * V(tau),   F_in = F_nom + F_dev * sin(tau / freq)

The controller observes ``[F_in,t, V_SP, V~_t, V~_{t-1}]`` where ``V~`` is the
volume reading with multiplicative Gaussian noise and ``V_SP = F_nom + F_dev``.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np

from .._accel import njit, prange
from ..errors import ContractError
from ..policy_net import LOG_2PI, _forward_cache, policy_forward_one
from .grid import TANK_GRID

log = logging.getLogger(__name__)

TANK_FREQ = 1.0 / (2.0 * math.pi)
REWARD_SCALE = 10.0


@dataclass(frozen=True)
class TankDesign:
    v_tank: float
    f_nom: float
    f_dev: float
    v0: float

    def __post_init__(self):
        for name in ("v_tank", "f_nom", "f_dev", "v0"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ContractError(f"TankDesign.{name} must be finite and >= 0, got {value}")

    @property
    def v_sp(self):
        return self.f_nom + self.f_dev


@dataclass
class StepResult:
    next_state: np.ndarray
    observation: np.ndarray
    reward: float
    info: dict


def inflow(tau, f_nom, f_dev, freq=TANK_FREQ):
    return f_nom + f_dev * np.sin(tau / freq)


def _tank_interval_py(v, a, t0, dt, substeps, f_nom, f_dev, freq):
    h = dt / substeps
    for i in range(substeps):
        t = t0 + i * h
        k1 = f_nom + f_dev * np.sin(t / freq) - a * v
        vm = v + 0.5 * h * k1
        fm = f_nom + f_dev * np.sin((t + 0.5 * h) / freq)
        k2 = fm - a * vm
        k3 = fm - a * (v + 0.5 * h * k2)
        k4 = f_nom + f_dev * np.sin((t + h) / freq) - a * (v + h * k3)
        v = v + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return v


tank_interval = njit(_tank_interval_py)


def setpoint_reward(v, v_sp):
    return -REWARD_SCALE * (v - v_sp) ** 2


def tank_step(design, grid, v_t, a_t, t_index, rng=None, noise_pct=0.0, prev_measurement=None, xi=None):
    """Advance one control interval with the valve held at ``a_t``.

    The returned observation is the one the controller sees at ``t_index + 1``.
    ``xi`` is the standard-normal draw for the new volume reading; when it is
    omitted it is taken from ``rng`` (no noise without either).
    """
    a = min(max(float(a_t), 0.0), 1.0)
    tau = t_index * grid.dt
    v_next = float(tank_interval(float(v_t), a, tau, grid.dt, grid.substeps, design.f_nom, design.f_dev, TANK_FREQ))
    floored = v_next < 0.0
    if floored:
        log.info("tank volume undershoot %.3g floored to 0 at step %d", v_next, t_index)
        v_next = 0.0
    if xi is None:
        xi = rng.standard_normal() if (rng is not None and noise_pct) else 0.0
    meas = v_next * (1.0 + noise_pct / 100.0 * xi)
    prev = meas if prev_measurement is None else prev_measurement
    tau_next = (t_index + 1) * grid.dt
    obs = np.array([inflow(tau_next, design.f_nom, design.f_dev), design.v_sp, meas, prev])
    return StepResult(
        next_state=np.array([v_next]),
        observation=obs,
        reward=setpoint_reward(v_next, design.v_sp),
        info={"f_in": inflow(tau, design.f_nom, design.f_dev), "floored": floored},
    )


class TankEnv:
    """Design-parameterised tank environment (gym-style ``reset``/``step``).

    ``reset(rng)`` draws the whole measurement-noise sequence up front, in
    the same order the batched kernels use, so a given seed produces the
    same noise for Python controllers and compiled policies.
    """

    kind = "tank"
    obs_dim = 4
    state_dim = 1
    n_controls = 1
    n_meas = 1
    action_low = np.array([0.0])
    action_high = np.array([1.0])
    state_names = ("V",)
    obs_names = ("F_in", "V_SP", "V_meas", "V_meas_prev")
    control_names = ("valve",)

    def __init__(self, design, grid=TANK_GRID, noise_pct=0.0):
        self.design = design
        self.grid = grid
        self.noise_pct = float(noise_pct)
        self._t = 0

    def design_row(self):
        d = self.design
        return np.array([d.f_nom, d.f_dev, d.v0, d.v_sp])

    def draw_meas_noise(self, rng):
        n = self.grid.n_steps + 1
        if rng is None:
            return np.zeros((n, self.n_meas))
        return rng.standard_normal((n, self.n_meas))

    def reset(self, rng=None):
        d = self.design
        self._t = 0
        self._v = d.v0
        self._xi = self.draw_meas_noise(rng)
        self._meas = d.v0 * (1.0 + self.noise_pct / 100.0 * self._xi[0, 0])
        return np.array([inflow(0.0, d.f_nom, d.f_dev), d.v_sp, self._meas, self._meas])

    def step(self, u):
        if self._t >= self.grid.n_steps:
            raise ContractError("episode is over; call reset()")
        res = tank_step(
            self.design, self.grid, self._v, np.ravel(u)[0], self._t,
            noise_pct=self.noise_pct, prev_measurement=self._meas, xi=self._xi[self._t + 1, 0],
        )
        self._v = res.next_state[0]
        self._meas = res.observation[2]
        self._t += 1
        return res

    @property
    def state(self):
        return np.array([self._v])


# -- batched rollouts -----------------------------------------------------------


@njit(parallel=True)
def tank_batch_kernel(
    theta, sizes, codes, n_c, low, high, floor, om, osd,
    designs, dt, n_steps, substeps, freq, noise_frac, stochastic, xi_act, xi_meas,
    states, obs, raw, applied, rewards, logp, status, floors,
):
    n_ep = designs.shape[0]
    for k in prange(n_ep):
        f_nom = designs[k, 0]
        f_dev = designs[k, 1]
        v = designs[k, 2]
        v_sp = designs[k, 3]
        meas = v * (1.0 + noise_frac * xi_meas[k, 0, 0])
        meas_prev = meas
        states[k, 0, 0] = v
        x = np.empty(4)
        mean = np.empty(n_c)
        std = np.empty(n_c)
        work = np.empty((2, sizes.max()))
        status[k] = -1
        for t in range(n_steps):
            tau = t * dt
            x[0] = f_nom + f_dev * np.sin(tau / freq)
            x[1] = v_sp
            x[2] = meas
            x[3] = meas_prev
            for i in range(4):
                obs[k, t, i] = x[i]
                x[i] = (x[i] - om[i]) / osd[i]
            policy_forward_one(theta, sizes, codes, n_c, low, high, floor, x, mean, std, work)
            u = mean[0] + std[0] * xi_act[k, t, 0] if stochastic else mean[0]
            a = min(max(u, low[0]), high[0])
            z = (u - mean[0]) / std[0]
            raw[k, t, 0] = u
            applied[k, t, 0] = a
            logp[k, t] = -0.5 * LOG_2PI - np.log(std[0]) - 0.5 * z * z
            v_new = tank_interval(v, a, tau, dt, substeps, f_nom, f_dev, freq)
            if not np.isfinite(v_new):
                status[k] = t
                break
            if v_new < 0.0:
                v_new = 0.0
                floors[k] += 1
            rewards[k, t] = -REWARD_SCALE * (v_new - v_sp) ** 2
            states[k, t + 1, 0] = v_new
            meas_prev = meas
            meas = v_new * (1.0 + noise_frac * xi_meas[k, t + 1, 0])
            v = v_new


def tank_batch_numpy(
    net, designs, dt, n_steps, substeps, freq, noise_frac, stochastic, xi_act, xi_meas,
    states, obs, raw, applied, rewards, logp, status, floors,
):
    """Vectorised-over-episodes twin of :func:`tank_batch_kernel`."""
    f_nom, f_dev, v, v_sp = (designs[:, i].copy() for i in range(4))
    meas = v * (1.0 + noise_frac * xi_meas[:, 0, 0])
    meas_prev = meas.copy()
    states[:, 0, 0] = v
    status[:] = -1
    alive = np.ones(designs.shape[0], dtype=bool)
    for t in range(n_steps):
        tau = t * dt
        x = np.stack([f_nom + f_dev * np.sin(tau / freq), v_sp, meas, meas_prev], axis=1)
        obs[:, t, :] = x
        mean, std, _ = _forward_cache(net, (x - net.obs_mean) / net.obs_std)
        u = mean[:, 0] + std[:, 0] * xi_act[:, t, 0] if stochastic else mean[:, 0]
        a = np.clip(u, net.action_low[0], net.action_high[0])
        z = (u - mean[:, 0]) / std[:, 0]
        raw[:, t, 0] = u
        applied[:, t, 0] = a
        logp[:, t] = -0.5 * LOG_2PI - np.log(std[:, 0]) - 0.5 * z * z
        v_new = _tank_interval_py(v, a, tau, dt, substeps, f_nom, f_dev, freq)
        bad = alive & ~np.isfinite(v_new)
        status[bad] = t
        alive &= ~bad
        floors += alive & (v_new < 0.0)
        v_new = np.where(alive, np.maximum(v_new, 0.0), v)
        rewards[:, t] = np.where(alive, -REWARD_SCALE * (v_new - v_sp) ** 2, 0.0)
        states[:, t + 1, 0] = v_new
        meas_prev = meas
        meas = v_new * (1.0 + noise_frac * xi_meas[:, t + 1, 0])
        v = v_new
