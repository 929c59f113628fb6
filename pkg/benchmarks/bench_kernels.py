"""Time the compiled rollout kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--episodes 20 200 1000] [--repeat 5]

Both backends run the same batch with the same generators; the script
checks that they agree before reporting timings.  The numpy fallback is
vectorised over episodes, so it narrows the gap as the batch grows; the
compiled kernels evaluate ``tanh`` one scalar at a time.
"""

import argparse
import time

import numpy as np

from bilevel_rl.environments.cstr import CstrDesign, CstrEnv
from bilevel_rl.environments.rollout import Mode, episode_rng, rollout_batch
from bilevel_rl.environments.tank import TankDesign, TankEnv
from bilevel_rl.policy_net import PolicyNetwork


def tank_case(n):
    rng = np.random.default_rng(0)
    envs = []
    for _ in range(n):
        f_nom, f_dev = rng.uniform(2, 6), rng.uniform(0, 5)
        envs.append(TankEnv(TankDesign(12.0, f_nom, f_dev, f_nom + f_dev), noise_pct=2.0))
    net = PolicyNetwork(4, [20, 20], 1, 0.0, 1.0, seed=1)
    net.obs_mean, net.obs_std = np.full(4, 6.0), np.full(4, 2.0)
    return envs, net


def cstr_case(n):
    rng = np.random.default_rng(0)
    envs = [CstrEnv(CstrDesign.with_prefix(int(rng.integers(0, 100)), 100, v=rng.uniform(600, 1200),
                                           m_nom=rng.uniform(12, 20), m_dev=rng.uniform(5, 8),
                                           ca0_nom=rng.uniform(0.5, 1.0), ca0_dev=rng.uniform(0, 0.5)))
            for _ in range(n)]
    net = PolicyNetwork(6, [20, 20], 1, 200.0, 500.0, seed=1)
    net.obs_mean = np.array([0.5, 0.5, 440.0, 900.0, 0.8, 0.0])
    net.obs_std = np.array([0.5, 0.5, 10.0, 200.0, 0.2, 1.0])
    return envs, net


def timed(envs, net, backend, repeat):
    best = np.inf
    for _ in range(repeat):
        rngs = [episode_rng(0, k) for k in range(len(envs))]
        t0 = time.perf_counter()
        batch = rollout_batch(envs, net, Mode.STOCHASTIC, rngs, backend=backend)
        best = min(best, time.perf_counter() - t0)
    return best, batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, nargs="+", default=[20, 200, 1000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    print(f"{'case':<6}{'episodes':>9}{'numba [s]':>12}{'numpy [s]':>12}{'speed-up':>10}{'max diff':>12}")
    for name, make in (("tank", tank_case), ("cstr", cstr_case)):
        for n in args.episodes:
            envs, net = make(n)
            timed(envs[:2], net, "numba", 1)  # compile outside the timing
            t_nb, a = timed(envs, net, "numba", args.repeat)
            t_np, b = timed(envs, net, "numpy", args.repeat)
            diff = float(np.max(np.abs(a.states - b.states)))
            assert np.allclose(a.states, b.states, rtol=1e-12, atol=1e-10), f"{name}: backends disagree"
            print(f"{name:<6}{n:>9}{t_nb:>12.4f}{t_np:>12.4f}{t_np / t_nb:>10.1f}{diff:>12.2e}")


if __name__ == "__main__":
    main()
