"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS`` or ``FAIL`` line that the terminal summary
prints (see ``conftest.py``).  The pipeline runs go through the installed CLI
in subprocesses so the thread-count environment variable takes effect.
"""

import dataclasses
import json
import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from bilevel_rl import policy_net
from bilevel_rl.config import load_config
from bilevel_rl.design import (
    CSTR_VARS,
    _tank_inner,
    cstr_cost,
    design_env,
    solve_cstr_design,
    tank_feasible,
)
from bilevel_rl.environments.cstr import CstrDesign, CstrEnv
from bilevel_rl.environments.grid import TANK_GRID
from bilevel_rl.environments.integrators import rk4_integrate
from bilevel_rl.environments.rollout import Mode, episode_rng, rollout_batch
from bilevel_rl.environments.tank import TankDesign, TankEnv
from bilevel_rl.errors import InfeasibleDesignError
from bilevel_rl.optim import AdamState
from bilevel_rl.pipeline import design_problem, solution_from_dict
from bilevel_rl.policy_net import PolicyNetwork, _forward_cache, forward, grad_log_prob, log_prob
from bilevel_rl.training import TrainConfig, policy_gradient, reinforce_update, train
from conftest import bandit_estimates, bandit_true_gradient, record

pytestmark = pytest.mark.slow

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
TANK_CFG = os.path.join(ROOT, "configs", "tank.json")
CSTR_CFG = os.path.join(ROOT, "configs", "cstr.json")
BENCHMARK_FDEV = 2.69


def run_cli(args, threads=None):
    env = dict(os.environ)
    if threads is not None:
        env["BILEVEL_RL_THREADS"] = str(threads)
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "bilevel_rl.cli", *args, "--quiet"], env=env,
                          capture_output=True, text=True)
    return proc, time.perf_counter() - t0


def check(n, ok, detail):
    record(n, ok, detail)
    assert ok, detail


@pytest.fixture(scope="module")
def tank_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("tank") / "out"
    proc, secs = run_cli(["pipeline", "--config", TANK_CFG, "--out", str(out)], threads=4)
    assert proc.returncode == 0, proc.stderr
    return out, secs


@pytest.fixture(scope="module")
def cstr_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("cstr") / "out"
    proc, secs = run_cli(["pipeline", "--config", CSTR_CFG, "--out", str(out), "--runs", "20"])
    assert proc.returncode == 0, proc.stderr
    return out, secs


# 1 ---------------------------------------------------------------------------------


def _near_kink(net, obs):
    _, _, (_, _, zm, zsd, s) = _forward_cache(net, obs[None, :])
    span = net.action_high - net.action_low
    raw_std = np.abs(s[0]) * span
    return (np.any(np.abs(zm) < 1e-3) or np.any(np.abs(zm - 6.0) < 1e-3) or np.any(np.abs(zsd) < 1e-3)
            or np.any(np.abs(raw_std - net.std_floor) < 1e-3 * net.std_floor))


def _central_difference(net, obs, u, h=1e-5):
    base = net.theta.copy()
    g = np.zeros_like(base)
    for i in range(base.size):
        net.theta[:] = base
        net.theta[i] = base[i] + h
        up = log_prob(forward(net, obs), u)
        net.theta[i] = base[i] - h
        dn = log_prob(forward(net, obs), u)
        g[i] = (up - dn) / (2 * h)
    net.theta[:] = base
    return g


def test_1_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst, n = 0.0, 0
    while n < 100:
        n_in, n_c = rng.integers(1, 5), rng.integers(1, 3)
        hidden = [int(w) for w in rng.integers(2, 8, size=rng.integers(0, 3))]
        net = PolicyNetwork(n_in, hidden, n_c, -1.0, rng.uniform(0.5, 4.0))
        net.set_theta(rng.normal(0.0, 0.7, net.n_params))
        net.biases[-2][:] += 3.0
        obs = rng.normal(size=n_in)
        if _near_kink(net, obs):
            continue
        d = forward(net, obs)
        u = d.mean + d.std * rng.normal(size=n_c)
        g = grad_log_prob(net, obs, u)
        fd = _central_difference(net, obs, u)
        worst = max(worst, float(np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)))
        n += 1
    secs = time.perf_counter() - t0
    check(1, worst <= 1e-4 and secs < 10.0, f"100 triples, worst relative error {worst:.2e}, {secs:.1f} s")


# 2 ---------------------------------------------------------------------------------


def test_2_rk4_accuracy_and_order():
    t0 = time.perf_counter()
    e1 = abs(rk4_integrate(lambda x, t: -x, 1.0, 0.0, 1.0, 100) - math.exp(-1.0))
    e2 = abs(rk4_integrate(lambda x, t: -x, 1.0, 0.0, 1.0, 200) - math.exp(-1.0))
    secs = time.perf_counter() - t0
    ok = e1 <= 1e-9 and 14.0 <= e1 / e2 <= 18.0 and secs < 1.0
    check(2, ok, f"error {e1:.3e} at dt=0.01, halving ratio {e1 / e2:.2f}, {secs * 1e3:.0f} ms")


# 3 ---------------------------------------------------------------------------------


def test_3_bandit_gradient_signs():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    wrong = []
    for p in range(10):
        theta = np.array([rng.uniform(0, 1), rng.uniform(1.5, 3), rng.uniform(-0.01, 0.01), rng.uniform(0.03, 0.08)])
        c = rng.uniform(-8, 8)
        est = bandit_estimates(theta, c, 10_000, 10, seed=p).mean(axis=0)
        true = bandit_true_gradient(theta, c)
        if not np.all(np.sign(est) == np.sign(true)):
            wrong.append(p)
    secs = time.perf_counter() - t0
    check(3, not wrong and secs < 60.0, f"10 points x 1e4 batches, sign mismatches at {wrong}, {secs:.1f} s")


# 4, 5, 6 ---------------------------------------------------------------------------


def test_4_tank_tracking_at_benchmark_deviation(tank_run):
    out, secs = tank_run
    cfg = load_config(TANK_CFG)
    policy = policy_net.load(out / "policy.json")
    problem = design_problem(cfg)
    ok, best = _tank_inner(policy, BENCHMARK_FDEV, problem, TANK_GRID)
    err = best["report"]["err"]
    mid = tank_feasible(policy, TankDesign(12.0, 4.0, BENCHMARK_FDEV, 4.0 + BENCHMARK_FDEV))["err"]
    detail = (f"F_dev={BENCHMARK_FDEV}: best err {err:.4f} at {best['design']}, "
              f"err at F_nom=4 {mid:.4f}, pipeline {secs:.0f} s")
    check(4, ok and err <= 0.01 and secs <= 900, detail)


def test_5_tank_design_meets_benchmark(tank_run):
    out, _ = tank_run
    d = json.loads((out / "design.json").read_text())
    f_dev = d["design"]["f_dev"]
    check(5, d["feasible"] and f_dev >= BENCHMARK_FDEV, f"F_dev = {f_dev:.4f} (stretch target 3.84)")


def test_6_pd_error_exceeds_policy_error(tank_run, tmp_path):
    out, _ = tank_run
    proc, secs = run_cli(["evaluate", "--config", TANK_CFG, "--out", str(tmp_path),
                          "--policy", str(out / "policy.json"), "--design", str(out / "design.json")])
    assert proc.returncode == 0, proc.stderr
    s = json.loads((tmp_path / "summary.json").read_text())
    cfg = load_config(TANK_CFG)
    ratio = s["pd_to_policy_error_ratio"]
    ok = (ratio >= 1.5 and s["n_runs"] == 1000 and cfg.design["mc_noise_pct"] == 2.0 and secs < 120
          and (tmp_path / "eval.csv").read_bytes() == (out / "eval.csv").read_bytes())
    check(6, ok, f"PD err {s['pd']['mean_err']:.4f} / PG err {s['policy']['mean_err']:.4f} = {ratio:.2f}, "
                 f"evaluation {secs:.0f} s")


# 7, 8 ------------------------------------------------------------------------------


def _cstr_solution(out):
    cfg = load_config(CSTR_CFG)
    sol = solution_from_dict(json.loads((out / "design.json").read_text()))
    return cfg, sol, policy_net.load(out / "policy.json"), design_problem(cfg)


def test_7_cstr_temperature_and_conversion(cstr_run):
    out, secs = cstr_run
    cfg, sol, policy, problem = _cstr_solution(out)
    env = design_env(sol, problem)
    states = rollout_batch([env], policy, Mode.MEAN_ACTION).states[0]
    n = env.grid.n_steps
    hot = int(np.sum(states[:, 1] > 450.0))
    ca_late = float(np.mean(states[n // 2:n, 0]))
    limit = 0.05 * sol.design["ca0_nom"]
    c = cstr_cost(env.design, states, env.grid)
    gap = abs(c.total - (c.equipment + c.operational))
    stored = sol.cost_components
    ok = (hot == 0 and ca_late <= limit and gap <= 1e-12 and c.total == sol.objective_value
          and abs(stored["total"] - (stored["equipment"] + stored["operational"])) <= 1e-12)
    check(7, ok, f"steps above 450 K: {hot}, max T {states[:, 1].max():.3f}, late mean C_A {ca_late:.4f} "
                 f"(limit {limit:.4f}), cost {c.total:.2f}, pipeline {secs:.0f} s")


def test_8_settling_tank_prefix(cstr_run):
    out, _ = cstr_run
    cfg, sol, policy, problem = _cstr_solution(out)
    env = design_env(sol, problem)
    y = np.asarray(env.design.y_schedule)
    prefix = sol.k > 0 and env.design.y_exists == 1 and np.all(y[:sol.k] == 1) and np.all(y[sol.k:] == 0)
    # the same continuous design without a settling tank overheats early on
    bare = CstrDesign(**{n: sol.design[n] for n in CSTR_VARS})
    bare_env = CstrEnv(bare, problem.params, env.grid)
    temps = rollout_batch([bare_env], policy, Mode.MEAN_ACTION).states[0][:, 1]
    first_hot = int(np.argmax(temps > 450.0)) if np.any(temps > 450.0) else None
    # and no k = 0 design in the box is feasible for this policy
    try:
        solve_cstr_design(policy, dataclasses.replace(problem, k_max=0))
        k0_infeasible = False
    except InfeasibleDesignError:
        k0_infeasible = True
    ok = prefix and k0_infeasible and first_hot is not None
    check(8, ok, f"k = {sol.k} of {len(y)} steps, k=0 infeasible: {k0_infeasible}, "
                 f"k=0 first exceeds 450 K at step {first_hot}")


# 9 ---------------------------------------------------------------------------------


def test_9_pipeline_is_deterministic_across_thread_counts(tank_run, tmp_path):
    out, _ = tank_run
    again = tmp_path / "again"
    proc, _ = run_cli(["pipeline", "--config", TANK_CFG, "--out", str(again)], threads=1)
    assert proc.returncode == 0, proc.stderr
    same = {n: (again / n).read_bytes() == (out / n).read_bytes() for n in ("policy.json", "design.json", "eval.csv")}
    check(9, all(same.values()), f"threads 4 vs 1, identical: {same}")


# 10 --------------------------------------------------------------------------------


def test_10_reinforce_invariances():
    net = PolicyNetwork(4, [20, 20], 1, 0.0, 1.0, seed=1)
    net.obs_mean, net.obs_std = np.full(4, 6.0), np.full(4, 2.0)

    def factory(rng):
        f_nom, f_dev = rng.uniform(2, 6), rng.uniform(0, 5)
        return TankEnv(TankDesign(12.0, f_nom, f_dev, f_nom + f_dev))

    envs = [factory(episode_rng(10, k)) for k in range(8)]
    batch = rollout_batch(envs, net, Mode.STOCHASTIC, [episode_rng(10, k, 1) for k in range(8)])
    J = batch.returns()
    g1, _ = policy_gradient(net, batch.observations, batch.raw_actions, J)
    g2, _ = policy_gradient(net, batch.observations, batch.raw_actions, J - 123.0)
    shift = float(np.max(np.abs(g1 - g2)) / np.max(np.abs(g1)))

    before = net.theta.copy()
    batch.rewards[:] = -0.5
    grad, _, _ = reinforce_update(net, batch, AdamState(), 1e-2)
    zero = bool(np.all(grad == 0.0) and np.array_equal(net.theta, before))

    out, _ = train(factory, net, TrainConfig(n_epochs=0))
    identity = out is net and np.array_equal(net.theta, before)
    check(10, shift <= 1e-9 and zero and identity,
          f"shift changes the update by {shift:.1e} (relative), identical returns give zero update: {zero}, "
          f"N=0 identity: {identity}")
