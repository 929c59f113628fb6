"""Jacketed CSTR with a first-order endothermic reaction A -> B.

    dC_A/dtau = m/(rho V) (C_A0 - C_A) - k0 C_A exp(-E_A / (R T))
    dT/dtau   = [m C_P (T0 - T) + V dH k0 C_A exp(-E_A/(R T)) + UA (T_H - T)] / (V rho C_P)

    C_A0 = C_A0,nom + C_A0,dev sin(tau / freq)
    m    = m_nom + m_dev (1 - Y_S,t) sin(tau / freq),   freq = 100 / (2 pi)

The jacket temperature T_H is the control.  An optional settling tank
(``Y_S,t = 1``) holds the feed flow at its nominal value.  The controller sees
``[C_A,t, C_A,t-1, T_t, V, C_A0,t, C_A_SP]`` and never the flow.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .._accel import njit, prange
from ..errors import ContractError, IntegrationError
from ..policy_net import LOG_2PI, _forward_cache, policy_forward_one
from .grid import CSTR_GRID
from .tank import StepResult

CSTR_FREQ = 100.0 / (2.0 * math.pi)
CA_SETPOINT = 0.0
T_PENALTY = 100.0


@dataclass(frozen=True)
class CstrParams:
    """Physical constants and operating limits.

    Consistent units with time in the same unit as the 100-unit disturbance
    period.  ``dh_rxn < 0`` makes the reaction a heat sink.  The feed arrives
    preheated above the 450 K limit, so an unobserved flow surge heats the
    reactor; with the default design bounds even full jacket cooling cannot
    hold 450 K through the first half-period unless the settling tank damps
    the surge.
    """

    rho: float = 0.3
    k0: float = 1.0e8
    ea: float = 66512.0
    r_gas: float = 8.314
    dh_rxn: float = -2.0
    cp: float = 1.0
    ua: float = 9.0
    t0: float = 610.0
    t_max: float = 450.0
    th_min: float = 200.0
    th_max: float = 500.0
    t_init: float = 440.0
    ca_init_factor: float = 1.5

    def __post_init__(self):
        for name in ("rho", "k0", "ea", "r_gas", "cp", "ua", "t0", "th_min", "th_max", "t_init"):
            if not getattr(self, name) > 0:
                raise ContractError(f"CstrParams.{name} must be positive")
        if self.t_max != 450.0:
            raise ContractError("CstrParams.t_max is fixed at 450 K")
        if self.th_max <= self.th_min:
            raise ContractError("th_max must exceed th_min")

    def as_array(self):
        return np.array([self.rho, self.k0, self.ea / self.r_gas, self.dh_rxn, self.cp, self.ua, self.t0])


@dataclass(frozen=True)
class CstrDesign:
    v: float
    m_nom: float
    m_dev: float
    ca0_nom: float
    ca0_dev: float
    y_schedule: tuple = field(default=())
    y_exists: int = 0

    def __post_init__(self):
        for name in ("v", "m_nom", "m_dev", "ca0_nom", "ca0_dev"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ContractError(f"CstrDesign.{name} must be finite and >= 0, got {value}")
        if self.v <= 0.0:
            raise ContractError("CstrDesign.v must be positive")
        ysched = tuple(int(y) for y in self.y_schedule)
        if any(y not in (0, 1) for y in ysched) or self.y_exists not in (0, 1):
            raise ContractError("settling-tank binaries must be 0 or 1")
        if any(y > self.y_exists for y in ysched):
            raise ContractError("Y_S,t - Y_S,f <= 0 violated: schedule uses a settling tank that does not exist")
        object.__setattr__(self, "y_schedule", ysched)

    def schedule(self, n_steps):
        if not self.y_schedule:
            return np.zeros(n_steps)
        if len(self.y_schedule) != n_steps:
            raise ContractError(f"y_schedule has {len(self.y_schedule)} entries, grid has {n_steps} steps")
        return np.asarray(self.y_schedule, dtype=float)

    @classmethod
    def with_prefix(cls, k, n_steps, **kwargs):
        """Design whose settling tank runs for the first ``k`` steps only."""
        ysched = tuple(1 if t < k else 0 for t in range(n_steps))
        return cls(y_schedule=ysched, y_exists=int(k > 0), **kwargs)


def feed_concentration(tau, ca0_nom, ca0_dev, freq=CSTR_FREQ):
    return ca0_nom + ca0_dev * np.sin(tau / freq)


def feed_flow(tau, m_nom, m_dev, y, freq=CSTR_FREQ):
    return m_nom + m_dev * (1.0 - y) * np.sin(tau / freq)


def _cstr_rhs(ca, temp, tau, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq):
    rho, k0, e_over_r, dh, cp, ua, t0 = pp[0], pp[1], pp[2], pp[3], pp[4], pp[5], pp[6]
    s = np.sin(tau / freq)
    m = m_nom + m_dev * (1.0 - y) * s
    ca0 = ca0_nom + ca0_dev * s
    rate = k0 * ca * np.exp(-e_over_r / temp)
    dca = m / (rho * v) * (ca0 - ca) - rate
    dtemp = (m * cp * (t0 - temp) + v * dh * rate + ua * (th - temp)) / (v * rho * cp)
    return dca, dtemp


def _cstr_interval_py(ca, temp, t0, dt, substeps, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq):
    h = dt / substeps
    for i in range(substeps):
        t = t0 + i * h
        a1, b1 = _cstr_rhs(ca, temp, t, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        a2, b2 = _cstr_rhs(ca + 0.5 * h * a1, temp + 0.5 * h * b1, t + 0.5 * h, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        a3, b3 = _cstr_rhs(ca + 0.5 * h * a2, temp + 0.5 * h * b2, t + 0.5 * h, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        a4, b4 = _cstr_rhs(ca + h * a3, temp + h * b3, t + h, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        ca = ca + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        temp = temp + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return ca, temp


_cstr_rhs_jit = njit(_cstr_rhs)


@njit
def cstr_interval(ca, temp, t0, dt, substeps, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq):
    h = dt / substeps
    for i in range(substeps):
        t = t0 + i * h
        a1, b1 = _cstr_rhs_jit(ca, temp, t, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        a2, b2 = _cstr_rhs_jit(ca + 0.5 * h * a1, temp + 0.5 * h * b1, t + 0.5 * h, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        a3, b3 = _cstr_rhs_jit(ca + 0.5 * h * a2, temp + 0.5 * h * b2, t + 0.5 * h, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        a4, b4 = _cstr_rhs_jit(ca + h * a3, temp + h * b3, t + h, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        ca = ca + (h / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)
        temp = temp + (h / 6.0) * (b1 + 2.0 * b2 + 2.0 * b3 + b4)
    return ca, temp


def cstr_reward(ca, temp, t_max=450.0):
    return -(ca - CA_SETPOINT) - T_PENALTY * max(0.0, temp - t_max)


def cstr_step(design, params, grid, state, th_t, t_index, rng=None, noise_pct=0.0, prev_obs=None, xi=None):
    """Advance one control interval with the jacket held at ``th_t``.

    Returns the observation seen at ``t_index + 1``.  ``prev_obs`` is the
    observation at ``t_index`` (supplies ``C_A,t``); ``xi`` holds the two
    standard-normal draws for the new C_A and T readings.
    """
    th = min(max(float(th_t), params.th_min), params.th_max)
    ca, temp = float(state[0]), float(state[1])
    if ca < 0.0:
        raise ContractError("C_A must be >= 0")
    ysched = design.schedule(grid.n_steps)
    y = float(ysched[t_index])
    tau = t_index * grid.dt
    ca_n, t_n = cstr_interval(
        ca, temp, tau, grid.dt, grid.substeps, th, y, design.v, design.m_nom, design.m_dev,
        design.ca0_nom, design.ca0_dev, params.as_array(), CSTR_FREQ,
    )
    if not (math.isfinite(ca_n) and math.isfinite(t_n)):
        raise IntegrationError(t_index)
    floored = ca_n < 0.0
    ca_n = max(ca_n, 0.0)
    if xi is None:
        xi = rng.standard_normal(2) if (rng is not None and noise_pct) else np.zeros(2)
    frac = noise_pct / 100.0
    ca_meas = ca_n * (1.0 + frac * xi[0])
    t_meas = t_n * (1.0 + frac * xi[1])
    ca_prev = ca_meas if prev_obs is None else prev_obs[0]
    tau_n = (t_index + 1) * grid.dt
    obs = np.array([ca_meas, ca_prev, t_meas, design.v, feed_concentration(tau_n, design.ca0_nom, design.ca0_dev), CA_SETPOINT])
    return StepResult(
        next_state=np.array([ca_n, t_n]),
        observation=obs,
        reward=cstr_reward(ca_n, t_n, params.t_max),
        info={
            "m": feed_flow(tau, design.m_nom, design.m_dev, y),
            "ca0": feed_concentration(tau, design.ca0_nom, design.ca0_dev),
            "floored": floored,
        },
    )


class CstrEnv:
    """Design-parameterised CSTR environment (gym-style ``reset``/``step``)."""

    kind = "cstr"
    obs_dim = 6
    state_dim = 2
    n_controls = 1
    n_meas = 2
    state_names = ("C_A", "T")
    obs_names = ("C_A_meas", "C_A_meas_prev", "T_meas", "V", "C_A0", "C_A_SP")
    control_names = ("T_H",)

    def __init__(self, design, params=None, grid=CSTR_GRID, noise_pct=0.0):
        self.design = design
        self.params = params or CstrParams()
        self.grid = grid
        self.noise_pct = float(noise_pct)
        self.action_low = np.array([self.params.th_min])
        self.action_high = np.array([self.params.th_max])
        self._t = 0

    def initial_state(self):
        return np.array([self.params.ca_init_factor * self.design.ca0_nom, self.params.t_init])

    def design_row(self):
        d = self.design
        return np.array([d.v, d.m_nom, d.m_dev, d.ca0_nom, d.ca0_dev, *self.initial_state()])

    def draw_meas_noise(self, rng):
        n = self.grid.n_steps + 1
        if rng is None:
            return np.zeros((n, self.n_meas))
        return rng.standard_normal((n, self.n_meas))

    def reset(self, rng=None):
        d = self.design
        self._t = 0
        self._x = self.initial_state()
        self._xi = self.draw_meas_noise(rng)
        frac = self.noise_pct / 100.0
        ca_meas = self._x[0] * (1.0 + frac * self._xi[0, 0])
        t_meas = self._x[1] * (1.0 + frac * self._xi[0, 1])
        self._obs = np.array([ca_meas, ca_meas, t_meas, d.v, feed_concentration(0.0, d.ca0_nom, d.ca0_dev), CA_SETPOINT])
        return self._obs.copy()

    def step(self, u):
        if self._t >= self.grid.n_steps:
            raise ContractError("episode is over; call reset()")
        res = cstr_step(
            self.design, self.params, self.grid, self._x, np.ravel(u)[0], self._t,
            noise_pct=self.noise_pct, prev_obs=self._obs, xi=self._xi[self._t + 1],
        )
        self._x = res.next_state
        self._obs = res.observation
        self._t += 1
        return res

    @property
    def state(self):
        return self._x.copy()


# -- batched rollouts -----------------------------------------------------------


@njit(parallel=True)
def cstr_batch_kernel(
    theta, sizes, codes, n_c, low, high, floor, om, osd,
    designs, ysched, pp, t_max, dt, n_steps, substeps, freq, noise_frac, stochastic, xi_act, xi_meas,
    states, obs, raw, applied, rewards, logp, status, floors, dist,
):
    n_ep = designs.shape[0]
    for k in prange(n_ep):
        v = designs[k, 0]
        m_nom = designs[k, 1]
        m_dev = designs[k, 2]
        ca0_nom = designs[k, 3]
        ca0_dev = designs[k, 4]
        ca = designs[k, 5]
        temp = designs[k, 6]
        ca_meas = ca * (1.0 + noise_frac * xi_meas[k, 0, 0])
        t_meas = temp * (1.0 + noise_frac * xi_meas[k, 0, 1])
        ca_prev = ca_meas
        states[k, 0, 0] = ca
        states[k, 0, 1] = temp
        x = np.empty(6)
        mean = np.empty(n_c)
        std = np.empty(n_c)
        work = np.empty((2, sizes.max()))
        status[k] = -1
        for t in range(n_steps):
            tau = t * dt
            s = np.sin(tau / freq)
            y = ysched[k, t]
            dist[k, t, 0] = m_nom + m_dev * (1.0 - y) * s
            dist[k, t, 1] = ca0_nom + ca0_dev * s
            x[0] = ca_meas
            x[1] = ca_prev
            x[2] = t_meas
            x[3] = v
            x[4] = dist[k, t, 1]
            x[5] = 0.0
            for i in range(6):
                obs[k, t, i] = x[i]
                x[i] = (x[i] - om[i]) / osd[i]
            policy_forward_one(theta, sizes, codes, n_c, low, high, floor, x, mean, std, work)
            u = mean[0] + std[0] * xi_act[k, t, 0] if stochastic else mean[0]
            th = min(max(u, low[0]), high[0])
            z = (u - mean[0]) / std[0]
            raw[k, t, 0] = u
            applied[k, t, 0] = th
            logp[k, t] = -0.5 * LOG_2PI - np.log(std[0]) - 0.5 * z * z
            ca_n, t_n = cstr_interval(ca, temp, tau, dt, substeps, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
            if not (np.isfinite(ca_n) and np.isfinite(t_n)):
                status[k] = t
                break
            if ca_n < 0.0:
                ca_n = 0.0
                floors[k] += 1
            excess = t_n - t_max
            rewards[k, t] = -ca_n - (T_PENALTY * excess if excess > 0.0 else 0.0)
            states[k, t + 1, 0] = ca_n
            states[k, t + 1, 1] = t_n
            ca_prev = ca_meas
            ca_meas = ca_n * (1.0 + noise_frac * xi_meas[k, t + 1, 0])
            t_meas = t_n * (1.0 + noise_frac * xi_meas[k, t + 1, 1])
            ca = ca_n
            temp = t_n
        tau_end = n_steps * dt
        s_end = np.sin(tau_end / freq)
        dist[k, n_steps, 0] = m_nom + m_dev * (1.0 - ysched[k, n_steps - 1]) * s_end
        dist[k, n_steps, 1] = ca0_nom + ca0_dev * s_end


def cstr_batch_numpy(
    net, designs, ysched, pp, t_max, dt, n_steps, substeps, freq, noise_frac, stochastic, xi_act, xi_meas,
    states, obs, raw, applied, rewards, logp, status, floors, dist,
):
    """Vectorised-over-episodes twin of :func:`cstr_batch_kernel`."""
    v, m_nom, m_dev, ca0_nom, ca0_dev, ca, temp = (designs[:, i].copy() for i in range(7))
    ca_meas = ca * (1.0 + noise_frac * xi_meas[:, 0, 0])
    t_meas = temp * (1.0 + noise_frac * xi_meas[:, 0, 1])
    ca_prev = ca_meas.copy()
    states[:, 0, 0] = ca
    states[:, 0, 1] = temp
    status[:] = -1
    alive = np.ones(designs.shape[0], dtype=bool)
    zeros = np.zeros_like(v)
    for t in range(n_steps):
        tau = t * dt
        s = np.sin(tau / freq)
        y = ysched[:, t]
        dist[:, t, 0] = m_nom + m_dev * (1.0 - y) * s
        dist[:, t, 1] = ca0_nom + ca0_dev * s
        x = np.stack([ca_meas, ca_prev, t_meas, v, dist[:, t, 1], zeros], axis=1)
        obs[:, t, :] = x
        mean, std, _ = _forward_cache(net, (x - net.obs_mean) / net.obs_std)
        u = mean[:, 0] + std[:, 0] * xi_act[:, t, 0] if stochastic else mean[:, 0]
        th = np.clip(u, net.action_low[0], net.action_high[0])
        z = (u - mean[:, 0]) / std[:, 0]
        raw[:, t, 0] = u
        applied[:, t, 0] = th
        logp[:, t] = -0.5 * LOG_2PI - np.log(std[:, 0]) - 0.5 * z * z
        with np.errstate(all="ignore"):
            ca_n, t_n = _cstr_interval_py(ca, temp, tau, dt, substeps, th, y, v, m_nom, m_dev, ca0_nom, ca0_dev, pp, freq)
        bad = alive & ~(np.isfinite(ca_n) & np.isfinite(t_n))
        status[bad] = t
        alive &= ~bad
        floors += alive & (ca_n < 0.0)
        ca_n = np.where(alive, np.maximum(ca_n, 0.0), ca)
        t_n = np.where(alive, t_n, temp)
        rewards[:, t] = np.where(alive, -ca_n - T_PENALTY * np.maximum(t_n - t_max, 0.0), 0.0)
        states[:, t + 1, 0] = ca_n
        states[:, t + 1, 1] = t_n
        ca_prev = ca_meas
        ca_meas = ca_n * (1.0 + noise_frac * xi_meas[:, t + 1, 0])
        t_meas = t_n * (1.0 + noise_frac * xi_meas[:, t + 1, 1])
        ca, temp = ca_n, t_n
    s_end = np.sin(n_steps * dt / freq)
    dist[:, n_steps, 0] = m_nom + m_dev * (1.0 - ysched[:, n_steps - 1]) * s_end
    dist[:, n_steps, 1] = ca0_nom + ca0_dev * s_end
