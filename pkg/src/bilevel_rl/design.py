"""Outer design problems with the trained policy embedded as the controller.

Tank: largest feed deviation ``F_dev`` the policy can track within the error
and cyclic end-point tolerances.  CSTR: cheapest reactor design, with the
settling tank restricted to an on-then-off prefix schedule.
"""

import logging
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.optimize import minimize

from .environments.cstr import CstrDesign, CstrEnv, CstrParams, feed_concentration, feed_flow
from .environments.grid import CSTR_GRID, TANK_GRID
from .environments.rollout import Mode, episode_rng, rollout_batch, simulate
from .environments.tank import TankDesign, TankEnv
from .errors import ContractError, InfeasibleDesignError, IntegrationError
from .policy_net import PolicyNetwork

log = logging.getLogger(__name__)

FEAS_TOL = 1e-9

TANK_BOUNDS = {"f_nom": (2.0, 6.0), "f_dev": (0.0, 5.0), "v_tank": (6.0, 12.0), "v0": (0.0, 12.0)}
# m_dev has a positive floor: the feed always oscillates, and with the default
# CstrParams every k = 0 design in this box overheats during the flow surge.
CSTR_BOUNDS = {
    "v": (600.0, 1200.0),
    "m_nom": (12.0, 20.0),
    "m_dev": (5.0, 8.0),
    "ca0_nom": (0.5, 1.0),
    "ca0_dev": (0.0, 0.5),
}
CSTR_VARS = ("v", "m_nom", "m_dev", "ca0_nom", "ca0_dev")


class Objective(str, Enum):
    MAXIMIZE_FDEV = "maximize_fdev"
    MINIMIZE_CSTR_COST = "minimize_cstr_cost"


@dataclass
class DesignProblem:
    objective: Objective
    bounds: dict = None
    epsilon: float = 1.0
    eval_noise_pct: float = 0.0
    # tank
    tol: float = 0.01
    n_starts: int = 4
    max_evals: int = 300
    # cstr
    err_max: float = 100.0
    k_max: int = 100
    k_step: int = 1
    mesh0: float = 0.25
    mesh_min: float = 1e-3
    params: CstrParams = field(default_factory=CstrParams)
    seed: int = 0

    def __post_init__(self):
        self.objective = Objective(self.objective)
        if self.bounds is None:
            base = TANK_BOUNDS if self.objective is Objective.MAXIMIZE_FDEV else CSTR_BOUNDS
            self.bounds = dict(base)
        self.bounds = {k: (float(lo), float(hi)) for k, (lo, hi) in self.bounds.items()}
        for name, (lo, hi) in self.bounds.items():
            if not (math.isfinite(lo) and math.isfinite(hi) and lo <= hi):
                raise ContractError(f"bounds for {name} must be finite with min <= max")
        if not self.epsilon > 0:
            raise ContractError("epsilon must be positive")
        need = TANK_BOUNDS if self.objective is Objective.MAXIMIZE_FDEV else CSTR_BOUNDS
        missing = set(need) - set(self.bounds)
        if missing:
            raise ContractError(f"missing bounds for {sorted(missing)}")


@dataclass
class DesignSolution:
    objective: str
    design: dict
    objective_value: float
    feasible: bool
    residuals: dict
    k: int = None
    cost_components: dict = None
    mc: dict = None
    info: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "objective": self.objective,
            "design": self.design,
            "objective_value": self.objective_value,
            "feasible": self.feasible,
            "residuals": self.residuals,
            "k": self.k,
            "cost_components": self.cost_components,
            "mc": self.mc,
        }


# -- tank ---------------------------------------------------------------------------


def _run_one(env, policy, rng=None):
    if isinstance(policy, PolicyNetwork):
        batch = rollout_batch([env], policy, Mode.MEAN_ACTION, [rng])
        return batch.states[0]
    return simulate(env, policy, rng).states


def tank_residuals(design, states, grid, epsilon):
    v = states[:, 0]
    v_sp = design.v_sp
    err = float(np.sum(np.abs(v[:-1] - v_sp)) / v_sp * grid.dt) if v_sp > 0 else math.inf
    tol = epsilon / 100.0
    return {
        "error_integral": err - tol,
        "cyclic": abs(v[-1] - v[0]) - tol * v[0],
        "capacity": v_sp - design.v_tank,
    }, err


def tank_feasible(policy, design, grid=TANK_GRID, epsilon=1.0, noise_pct=0.0, seed=None):
    """Evaluate the tank end-point constraints under a mean-action rollout.

    ``policy`` is a :class:`PolicyNetwork` or a controller ``f(obs, t)``.
    ``err`` is the rectangle-rule integral of ``|V - V_SP| / V_SP``.
    """
    env = TankEnv(design, grid, noise_pct)
    rng = None if seed is None or not noise_pct else episode_rng(seed)
    try:
        states = _run_one(env, policy, rng)
    except IntegrationError as exc:
        return {"feasible": False, "err": math.inf, "residuals": {}, "diagnostic": str(exc)}
    res, err = tank_residuals(design, states, grid, epsilon)
    feasible = all(r <= FEAS_TOL for r in res.values())
    return {"feasible": feasible, "err": err, "residuals": res, "states": states}


class _Found(Exception):
    pass


def _tank_inner(policy, f_dev, problem, grid):
    """Search (F_nom, V_tank, V0) for a feasible point at fixed ``f_dev``."""
    b = problem.bounds
    names = ("f_nom", "v_tank", "v0")
    lows = np.array([b[n][0] for n in names])
    highs = np.array([b[n][1] for n in names])
    best = {"merit": math.inf, "x": None, "report": None}

    def make(x):
        f_nom, v_tank, v0 = np.clip(x, lows, highs)
        return TankDesign(v_tank=float(v_tank), f_nom=float(f_nom), f_dev=float(f_dev), v0=float(v0))

    def merit(x):
        d = make(x)
        rep = tank_feasible(policy, d, grid, problem.epsilon, problem.eval_noise_pct, problem.seed)
        if not rep["residuals"]:
            m = 1e6
        else:
            r = rep["residuals"]
            m = (100.0 * max(r["error_integral"], 0.0) + 100.0 * max(r["cyclic"], 0.0) / max(d.v0, 1e-9)
                 + max(r["capacity"], 0.0))
        if m < best["merit"]:
            best.update(merit=m, x=np.clip(x, lows, highs), report=rep, design=d)
        if rep["feasible"]:
            raise _Found
        return m

    rng = np.random.default_rng([problem.seed, int(round(f_dev * 1e6))])
    # first start: largest feed that still fits the tank, starting at setpoint
    f_nom0 = min(highs[0], highs[1] - f_dev)
    f_nom0 = max(f_nom0, lows[0])
    starts = [np.array([f_nom0, highs[1], min(max(f_nom0 + f_dev, lows[2]), highs[2])])]
    for _ in range(max(problem.n_starts - 1, 0)):
        x = lows + rng.random(3) * (highs - lows)
        x[2] = min(max(x[0] + f_dev, lows[2]), highs[2])
        starts.append(x)
    for x0 in starts:
        try:
            merit(x0)
            minimize(merit, x0, method="Nelder-Mead", bounds=list(zip(lows, highs)),
                     options={"maxfev": problem.max_evals, "xatol": 1e-4, "fatol": 1e-10})
        except _Found:
            return True, best
    return False, best


def solve_tank_design(policy, problem, grid=TANK_GRID):
    """Largest trackable ``F_dev`` by bisection over an inner feasibility search."""
    if problem.objective is not Objective.MAXIMIZE_FDEV:
        raise ContractError("solve_tank_design needs a MaximizeFdev problem")
    lo, hi = problem.bounds["f_dev"]
    probes = []

    def probe(f_dev):
        ok, best = _tank_inner(policy, f_dev, problem, grid)
        probes.append((f_dev, ok))
        log.info("F_dev=%.4f %s", f_dev, "feasible" if ok else "infeasible")
        return ok, best

    ok_lo, best_lo = probe(lo)
    if not ok_lo:
        raise InfeasibleDesignError("policy cannot stabilize nominal design", _best_report(best_lo))
    ok_hi, best_hi = probe(hi)
    if ok_hi:
        best_lo = best_hi
        lo = hi
    else:
        while hi - lo >= problem.tol:
            mid = 0.5 * (lo + hi)
            ok, best = probe(mid)
            if ok:
                lo, best_lo = mid, best
            else:
                hi = mid
    d = best_lo["design"]
    rep = best_lo["report"]
    return DesignSolution(
        objective=Objective.MAXIMIZE_FDEV.value,
        design={"f_nom": d.f_nom, "f_dev": d.f_dev, "v_tank": d.v_tank, "v0": d.v0, "v_sp": d.v_sp},
        objective_value=d.f_dev,
        feasible=True,
        residuals=dict(rep["residuals"], err=rep["err"]),
        info={"probes": probes, "bracket": [lo, hi]},
    )


def _best_report(best):
    rep = best.get("report") or {}
    return {"merit": best.get("merit"), "residuals": rep.get("residuals"), "err": rep.get("err")}


# -- CSTR ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CostBreakdown:
    equipment: float
    operational: float
    total: float


def cstr_cost(design, states, grid=CSTR_GRID, equip_tank_cost=400.0):
    """Equipment plus rectangle-rule operational cost of one trajectory.

    ``states`` is the (n_T + 1, 2) array of ``[C_A, T]``.
    """
    n = grid.n_steps
    tau = np.arange(n) * grid.dt
    y = design.schedule(n)
    m = feed_flow(tau, design.m_nom, design.m_dev, y)
    ca0 = feed_concentration(tau, design.ca0_nom, design.ca0_dev)
    ca = np.asarray(states)[:n, 0]
    operational = float(np.sum(-m * (ca0 - ca) + 4.0 * y) * grid.dt)
    equipment = 10.0 * (design.v - 750.0) / math.pi + 1000.0 + equip_tank_cost * design.y_exists
    return CostBreakdown(equipment, operational, equipment + operational)


def cstr_residuals(design, states, params, grid, err_max):
    temp = states[:, 1]
    err = float(np.sum(states[:-1, 0]) * grid.dt)
    return {
        "temperature": float(temp.max() - params.t_max),
        "error_integral": err - err_max,
        "flow_dev": design.m_dev - design.m_nom,
        "conc_dev": design.ca0_dev - design.ca0_nom,
    }, err


def _violation(states, design, params, grid, err_max):
    temp = states[:, 1]
    return (float(np.sum(np.maximum(temp - params.t_max, 0.0)))
            + max(float(np.sum(states[:-1, 0]) * grid.dt) - err_max, 0.0)
            + max(design.m_dev - design.m_nom, 0.0)
            + max(design.ca0_dev - design.ca0_nom, 0.0))


def _evaluate_cstr(policy, designs, problem, grid):
    envs = [CstrEnv(d, problem.params, grid) for d in designs]
    batch = rollout_batch(envs, policy, Mode.MEAN_ACTION)
    out = []
    for d, states in zip(designs, batch.states):
        viol = _violation(states, d, problem.params, grid, problem.err_max)
        cost = cstr_cost(d, states, grid).total
        out.append((viol, cost))
    return out


def _key(ev):
    viol, cost = ev
    # feasible points always beat infeasible ones; infeasible ones are ranked by violation
    return (0, cost) if viol <= 0.0 else (1, viol)


def _pattern_search(policy, k, problem, grid, x0):
    b = problem.bounds
    lows = np.array([b[n][0] for n in CSTR_VARS])
    span = np.array([b[n][1] - b[n][0] for n in CSTR_VARS])
    n = grid.n_steps

    def design_at(z):
        vals = lows + np.clip(z, 0.0, 1.0) * span
        return CstrDesign.with_prefix(k, n, **dict(zip(CSTR_VARS, (float(v) for v in vals))))

    z = np.asarray(x0, dtype=float)
    cur = _evaluate_cstr(policy, [design_at(z)], problem, grid)[0]
    mesh = problem.mesh0
    n_eval = 1
    while mesh >= problem.mesh_min:
        polls = []
        for i in range(len(CSTR_VARS)):
            for s in (1.0, -1.0):
                zz = z.copy()
                zz[i] = min(max(zz[i] + s * mesh, 0.0), 1.0)
                if zz[i] != z[i]:
                    polls.append(zz)
        if not polls:
            mesh *= 0.5
            continue
        evals = _evaluate_cstr(policy, [design_at(p) for p in polls], problem, grid)
        n_eval += len(polls)
        j = min(range(len(polls)), key=lambda i: _key(evals[i]))
        if _key(evals[j]) < _key(cur):
            z, cur = polls[j], evals[j]
        else:
            mesh *= 0.5
    return design_at(z), cur, n_eval


def cstr_report(policy, design, problem, grid=CSTR_GRID):
    env = CstrEnv(design, problem.params, grid)
    states = rollout_batch([env], policy, Mode.MEAN_ACTION).states[0]
    res, err = cstr_residuals(design, states, problem.params, grid, problem.err_max)
    cost = cstr_cost(design, states, grid)
    return res, err, cost, states


def solve_cstr_design(policy, problem, grid=CSTR_GRID, x0=None):
    """Minimum-cost design over prefix schedules ``k = 0, k_step, ..., k_max``."""
    if problem.objective is not Objective.MINIMIZE_CSTR_COST:
        raise ContractError("solve_cstr_design needs a MinimizeCstrCost problem")
    center = np.full(len(CSTR_VARS), 0.5) if x0 is None else np.asarray(x0, dtype=float)
    b = problem.bounds
    lows = np.array([b[n][0] for n in CSTR_VARS])
    span = np.array([b[n][1] - b[n][0] for n in CSTR_VARS])
    ks = list(range(0, min(problem.k_max, grid.n_steps) + 1, problem.k_step))
    candidates = []
    prev = None
    # longest prefix first: its optimum is a good start for the next shorter one
    for k in reversed(ks):
        starts = [center] if prev is None else [center, prev]
        runs = [_pattern_search(policy, k, problem, grid, z0) for z0 in starts]
        d, ev, _ = min(runs, key=lambda r: _key(r[1]))
        n_eval = sum(r[2] for r in runs)
        prev = np.divide(np.array([getattr(d, n) for n in CSTR_VARS]) - lows, span,
                         out=np.zeros(len(CSTR_VARS)), where=span > 0)
        candidates.append({"k": k, "design": d, "violation": ev[0], "cost": ev[1], "evals": n_eval})
        log.info("k=%d cost=%.3f violation=%.3g", k, ev[1], ev[0])
    candidates.reverse()
    feasible = [c for c in candidates if c["violation"] <= 0.0]
    if not feasible:
        best = min(candidates, key=lambda c: c["violation"])
        res, err, _, _ = cstr_report(policy, best["design"], problem, grid)
        raise InfeasibleDesignError(
            "no settling-tank prefix admits a feasible design",
            {"k": best["k"], "violation": best["violation"], "residuals": res},
        )
    best = min(feasible, key=lambda c: (c["cost"], c["k"]))
    d = best["design"]
    res, err, cost, _ = cstr_report(policy, d, problem, grid)
    return DesignSolution(
        objective=Objective.MINIMIZE_CSTR_COST.value,
        design={**{n: getattr(d, n) for n in CSTR_VARS}, "y_exists": d.y_exists},
        objective_value=cost.total,
        feasible=all(r <= FEAS_TOL for r in res.values()),
        residuals=dict(res, err=err),
        k=best["k"],
        cost_components={"equipment": cost.equipment, "operational": cost.operational, "total": cost.total},
        info={"candidates": [{k: c[k] for k in ("k", "cost", "violation", "evals")} for c in candidates]},
    )


# -- Monte-Carlo confirmation -------------------------------------------------------


@dataclass
class McStats:
    n_runs: int
    state_mean: np.ndarray
    state_std: np.ndarray
    control_mean: np.ndarray
    control_std: np.ndarray
    error_mean: np.ndarray
    mean_err: float
    violation_rate: float
    return_mean: float
    return_std: float

    def summary(self):
        return {
            "n_runs": self.n_runs,
            "mean_err": self.mean_err,
            "violation_rate": self.violation_rate,
            "return_mean": self.return_mean,
            "return_std": self.return_std,
        }


def _with_noise(env, noise_pct):
    if isinstance(env, TankEnv):
        return TankEnv(env.design, env.grid, noise_pct)
    return CstrEnv(env.design, env.params, env.grid, noise_pct)


def _run_errors(env, states, epsilon):
    """Per-run setpoint error integral, per-step error, and violation flag."""
    grid = env.grid
    if isinstance(env, TankEnv):
        d = env.design
        v = states[..., 0]
        step_err = np.abs(v - d.v_sp) / d.v_sp
        err = step_err[..., :-1].sum(axis=-1) * grid.dt
        cyc = np.abs(v[..., -1] - v[..., 0]) > epsilon / 100.0 * v[..., 0] + FEAS_TOL
        viol = (err > epsilon / 100.0 + FEAS_TOL) | cyc | (d.v_sp > d.v_tank)
        return err, step_err, viol
    ca = states[..., 0]
    err = ca[..., :-1].sum(axis=-1) * grid.dt
    viol = np.any(states[..., 1] > env.params.t_max, axis=-1)
    return err, ca, viol


def mc_confirm(policy, env, n_runs, noise_pct, seed, mode=Mode.MEAN_ACTION, epsilon=1.0, chunk=250):
    """Statistics over ``n_runs`` noisy rollouts of ``policy`` on ``env``'s design.

    Run ``i`` always uses the generator keyed by ``(seed, i)``, so the result
    does not depend on chunking or thread count.  ``policy`` may also be a
    Python controller, which runs through the step API.
    """
    if n_runs < 1:
        raise ContractError("n_runs must be >= 1")
    env = _with_noise(env, noise_pct)
    n_t = env.grid.n_steps
    states = np.zeros((n_runs, n_t + 1, env.state_dim))
    controls = np.zeros((n_runs, n_t, env.n_controls))
    returns = np.zeros(n_runs)
    rngs = [episode_rng(seed, i) for i in range(n_runs)]
    if isinstance(policy, PolicyNetwork):
        for s in range(0, n_runs, chunk):
            idx = slice(s, min(s + chunk, n_runs))
            part = rngs[idx]
            batch = rollout_batch([env] * len(part), policy, mode, part)
            states[idx] = batch.states
            controls[idx] = batch.applied_actions
            returns[idx] = batch.returns()
    else:
        for i, rng in enumerate(rngs):
            tr = simulate(env, policy, rng)
            states[i] = tr.states
            controls[i] = tr.applied_actions
            returns[i] = tr.total_return
    err, step_err, viol = _run_errors(env, states, epsilon)
    return McStats(
        n_runs=n_runs,
        state_mean=states.mean(axis=0),
        state_std=states.std(axis=0),
        control_mean=controls.mean(axis=0),
        control_std=controls.std(axis=0),
        error_mean=step_err.mean(axis=0),
        mean_err=float(err.mean()),
        violation_rate=float(np.mean(viol)),
        return_mean=float(returns.mean()),
        return_std=float(returns.std()),
    )


def design_env(solution, problem, grid=None):
    """Rebuild the environment for a solved design."""
    d = solution.design
    if problem.objective is Objective.MAXIMIZE_FDEV:
        return TankEnv(TankDesign(d["v_tank"], d["f_nom"], d["f_dev"], d["v0"]), grid or TANK_GRID)
    g = grid or CSTR_GRID
    design = CstrDesign.with_prefix(solution.k, g.n_steps, **{n: d[n] for n in CSTR_VARS})
    return CstrEnv(design, problem.params, g)
