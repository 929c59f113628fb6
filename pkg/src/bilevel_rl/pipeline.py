"""The five pipeline stages, driven by a :class:`RunConfig`.

pretrain -> train -> design -> evaluate, each reading the previous stage's
artifact from the output directory.
"""

import logging

import numpy as np

from .design import (
    CSTR_VARS,
    DesignProblem,
    DesignSolution,
    Objective,
    design_env,
    mc_confirm,
    solve_cstr_design,
    solve_tank_design,
)
from .environments.cstr import CstrDesign, CstrEnv
from .environments.grid import TimeGrid
from .environments.rollout import Mode, ObsStats, episode_rng, rollout_batch
from .environments.tank import TankDesign, TankEnv
from .evaluation import evaluate
from .policy_net import PolicyNetwork
from .training import CstrPd, TankPd, TrainConfig, collect_demos, pretrain, train

log = logging.getLogger(__name__)


def make_grid(cfg):
    e = cfg.env
    return TimeGrid(e["t_final"], e["n_steps"], e["substeps"])


def make_policy(cfg, seed=None):
    seed = cfg.seed if seed is None else seed
    p = cfg.policy
    if cfg.case == "tank":
        return PolicyNetwork(4, p["hidden"], 1, [0.0], [1.0], seed=seed, init_std_frac=p["init_std_frac"])
    params = cfg.cstr_params()
    return PolicyNetwork(6, p["hidden"], 1, [params.th_min], [params.th_max], seed=seed,
                         init_std_frac=p["init_std_frac"])


def _uniform(rng, lo, hi):
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def make_env_factory(cfg, noise_pct=None):
    """``factory(rng)`` builds an environment for a freshly sampled design."""
    grid = make_grid(cfg)
    r = cfg.train["ranges"]
    noise = cfg.env["noise_pct"] if noise_pct is None else noise_pct
    if cfg.case == "tank":
        spread = cfg.train["v0_spread"]

        def factory(rng):
            f_nom = _uniform(rng, *r["f_nom"])
            f_dev = _uniform(rng, *r["f_dev"])
            v_tank = _uniform(rng, *r["v_tank"])
            v0 = (f_nom + f_dev) * (1.0 + _uniform(rng, -spread, spread))
            return TankEnv(TankDesign(v_tank, f_nom, f_dev, v0), grid, noise)

        return factory

    params = cfg.cstr_params()

    def factory(rng):
        v = _uniform(rng, *r["v"])
        m_nom = _uniform(rng, *r["m_nom"])
        hi = min(r["m_dev"][1], m_nom)
        m_dev = _uniform(rng, min(r["m_dev"][0], hi), hi)
        ca0_nom = _uniform(rng, *r["ca0_nom"])
        hi = min(r["ca0_dev"][1], ca0_nom)
        ca0_dev = _uniform(rng, min(r["ca0_dev"][0], hi), hi)
        return CstrEnv(CstrDesign(v, m_nom, m_dev, ca0_nom, ca0_dev), params, grid, noise)

    return factory


def make_demonstrator(cfg):
    pre = cfg.pretrain
    grid = make_grid(cfg)
    if cfg.case == "tank":
        return TankPd(pre["kp"], pre["kd"], grid.dt)
    params = cfg.cstr_params()
    return CstrPd(pre["kp"], pre["kd"], pre["target"], pre["offset"], grid.dt, params.th_min, params.th_max)


def stage_pretrain(cfg):
    """Fresh policy cloned from the PD demonstrator; returns ``(policy, losses)``."""
    policy = make_policy(cfg)
    demos = collect_demos(make_env_factory(cfg), make_demonstrator(cfg), cfg.pretrain["n_demos"], cfg.seed)
    losses = pretrain(policy, demos, cfg.pretrain["n_iter"], cfg.pretrain["lr"], seed=cfg.seed)
    log.info("pre-training loss %.4g -> %.4g", losses[0], losses[-1])
    return policy, losses


def cold_start_policy(cfg):
    """Untrained policy whose normalisation comes from its own initial rollouts."""
    policy = make_policy(cfg)
    factory = make_env_factory(cfg)
    n = cfg.pretrain["n_demos"]
    envs = [factory(episode_rng(cfg.seed, k, 1)) for k in range(n)]
    batch = rollout_batch(envs, policy, Mode.MEAN_ACTION)
    stats = ObsStats.from_data(batch.observations.reshape(-1, policy.input_dim))
    policy.obs_mean, policy.obs_std = stats.mean, stats.std
    return policy


def train_config(cfg):
    t = cfg.train
    return TrainConfig(
        n_epochs=t["n_epochs"],
        n_episodes=t["n_episodes"],
        gamma=t["gamma"],
        alpha0=t["alpha0"],
        decay=t["decay"],
        start_epoch=t["start_epoch"],
        seed=cfg.seed,
    )


def stage_train(cfg, policy, progress=None):
    every = max(1, cfg.train["n_epochs"] // 10)

    def callback(m, _policy, report):
        if progress and (m % every == 0 or m == cfg.train["n_epochs"] - 1):
            progress(f"epoch {m}: mean return {report.mean_return[-1]:.4g}")

    return train(make_env_factory(cfg), policy, train_config(cfg), callback)


def design_problem(cfg):
    d = cfg.design
    if cfg.case == "tank":
        return DesignProblem(
            Objective.MAXIMIZE_FDEV, bounds=d["bounds"], epsilon=d["epsilon"], eval_noise_pct=d["eval_noise_pct"],
            tol=d["tol"], n_starts=d["n_starts"], max_evals=d["max_evals"], seed=cfg.seed,
        )
    return DesignProblem(
        Objective.MINIMIZE_CSTR_COST, bounds=d["bounds"], epsilon=d["epsilon"],
        eval_noise_pct=d["eval_noise_pct"], err_max=d["err_max"], k_max=d["k_max"], k_step=d["k_step"],
        mesh0=d["mesh0"], mesh_min=d["mesh_min"], params=cfg.cstr_params(), seed=cfg.seed,
    )


def stage_design(cfg, policy):
    """Solve the outer problem and attach Monte-Carlo statistics."""
    problem = design_problem(cfg)
    grid = make_grid(cfg)
    if cfg.case == "tank":
        sol = solve_tank_design(policy, problem, grid)
    else:
        sol = solve_cstr_design(policy, problem, grid)
    env = design_env(sol, problem, grid)
    d = cfg.design
    stats = mc_confirm(policy, env, d["n_runs"], d["mc_noise_pct"], cfg.seed, Mode(d["mc_mode"]), d["epsilon"])
    sol.mc = {"mean_err": stats.mean_err, "violation_rate": stats.violation_rate, "n_runs": stats.n_runs,
              "noise_pct": d["mc_noise_pct"]}
    return sol


def solution_from_dict(payload):
    return DesignSolution(
        objective=payload["objective"],
        design=payload["design"],
        objective_value=payload["objective_value"],
        feasible=payload["feasible"],
        residuals=payload["residuals"],
        k=payload.get("k"),
        cost_components=payload.get("cost_components"),
        mc=payload.get("mc"),
    )


def stage_evaluate(cfg, policy, solution):
    problem = design_problem(cfg)
    env = design_env(solution, problem, make_grid(cfg))
    d = cfg.design
    baseline = make_demonstrator(cfg) if cfg.case == "tank" else None
    return evaluate(policy, env, d["n_runs"], d["mc_noise_pct"], cfg.seed + 1, Mode(d["mc_mode"]), d["epsilon"],
                    baseline)


def check_solution_matches(cfg, solution):
    want = Objective.MAXIMIZE_FDEV if cfg.case == "tank" else Objective.MINIMIZE_CSTR_COST
    if solution.objective != want.value:
        return f"design.json holds a {solution.objective} solution, config case is {cfg.case}"
    keys = ("f_nom", "f_dev", "v_tank", "v0") if cfg.case == "tank" else CSTR_VARS
    missing = [k for k in keys if k not in solution.design]
    if missing:
        return f"design.json is missing {missing}"
    if not all(np.isfinite(float(solution.design[k])) for k in keys):
        return "design.json holds non-finite design values"
    return None
