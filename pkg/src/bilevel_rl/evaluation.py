"""Monte-Carlo evaluation reports and their plot-ready CSV form."""

from dataclasses import dataclass

import numpy as np

from .design import mc_confirm
from .environments.cstr import CstrEnv
from .environments.rollout import Mode, rollout
from .environments.tank import TankEnv
from .io import write_csv, write_json


@dataclass
class EvalReport:
    """Per-step bands of the learned policy and, for the tank, the PD baseline."""

    times: np.ndarray
    state_names: tuple
    control_names: tuple
    policy: object
    baseline: object = None
    trajectory: tuple = None

    def header(self):
        cols = ["t"]
        cols += [f"mean_{s}" for s in self.state_names]
        cols += [f"std_{s}" for s in self.state_names]
        cols += [f"mean_{u}" for u in self.control_names]
        cols += [f"std_{u}" for u in self.control_names]
        cols.append("mean_err")
        if self.baseline is not None:
            cols += [f"pd_{c}" for c in cols[1:]]
        return cols

    @staticmethod
    def _series(stats, t):
        n_t = len(stats.control_mean)
        row = list(stats.state_mean[t]) + list(stats.state_std[t])
        if t < n_t:
            row += list(stats.control_mean[t]) + list(stats.control_std[t])
        else:
            row += [""] * (2 * stats.control_mean.shape[1])
        row.append(stats.error_mean[t])
        return row

    def rows(self):
        out = []
        for t, tau in enumerate(self.times):
            row = [float(tau)] + self._series(self.policy, t)
            if self.baseline is not None:
                row += self._series(self.baseline, t)
            out.append([float(v) if isinstance(v, (np.floating, float)) else v for v in row])
        return out

    def summary(self):
        out = {"n_runs": self.policy.n_runs, "policy": self.policy.summary()}
        if self.baseline is not None:
            out["pd"] = self.baseline.summary()
            pg = self.policy.mean_err
            out["pd_to_policy_error_ratio"] = self.baseline.mean_err / pg if pg > 0 else None
        return out

    def write(self, out_dir):
        write_csv(out_dir / "eval.csv", self.header(), self.rows())
        write_json(out_dir / "summary.json", self.summary())
        if self.trajectory is not None:
            write_csv(out_dir / "trajectory.csv", *self.trajectory)


def evaluate(policy, env, n_runs, noise_pct, seed, mode=Mode.MEAN_ACTION, epsilon=1.0, baseline=None):
    """Monte-Carlo bands for ``policy`` on ``env``; ``baseline`` adds a comparison series.

    The report also carries one noiseless mean-action trajectory for plotting.
    """
    stats = mc_confirm(policy, env, n_runs, noise_pct, seed, mode, epsilon)
    base = None
    if baseline is not None:
        base = mc_confirm(baseline, env, n_runs, noise_pct, seed, mode, epsilon)
    return EvalReport(
        times=np.arange(env.grid.n_steps + 1) * env.grid.dt,
        state_names=env.state_names,
        control_names=env.control_names,
        policy=stats,
        baseline=base,
        trajectory=rollout(_noiseless(env), policy, Mode.MEAN_ACTION).table(env),
    )


def _noiseless(env):
    if isinstance(env, TankEnv):
        return TankEnv(env.design, env.grid)
    return CstrEnv(env.design, env.params, env.grid)
