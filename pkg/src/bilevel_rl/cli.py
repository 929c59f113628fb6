"""``bilevel-rl`` command line.

Exit codes: 0 success, 1 infeasible design, 2 configuration or usage error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import policy_net
from .config import load_config
from .errors import ConfigError, InfeasibleDesignError, PolicyFormatError
from .io import write_csv, write_json
from .pipeline import (
    check_solution_matches,
    cold_start_policy,
    solution_from_dict,
    stage_design,
    stage_evaluate,
    stage_pretrain,
    stage_train,
)

EXIT_OK, EXIT_INFEASIBLE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("bilevel_rl")


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits on its own; route usage errors through the exit-code contract instead
    def error(self, message):
        raise _UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, metavar="PATH", help="run configuration (JSON)")
    common.add_argument("--out", required=True, metavar="DIR", help="artifact directory")
    common.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    common.add_argument("--runs", type=int, metavar="N", help="override design.n_runs")
    common.add_argument("--quiet", action="store_true", help="only print errors")

    parser = _Parser(prog="bilevel-rl", description="Design-and-control pipeline with an embedded RL policy.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True
    policy_help = "policy file (default: OUT/policy.json)"

    sub.add_parser("pretrain", parents=[common], help="clone the PD demonstrator")
    p = sub.add_parser("train", parents=[common], help="Reinforce from the pre-trained policy")
    p.add_argument("--policy", metavar="PATH", help=policy_help)
    p.add_argument("--cold-start", action="store_true", help="train from a fresh network")
    p = sub.add_parser("design", parents=[common], help="solve the outer design problem")
    p.add_argument("--policy", metavar="PATH", help=policy_help)
    p = sub.add_parser("evaluate", parents=[common], help="Monte-Carlo report at the solved design")
    p.add_argument("--policy", metavar="PATH", help=policy_help)
    p.add_argument("--design", metavar="PATH", help="design file (default: OUT/design.json)")
    p = sub.add_parser("pipeline", parents=[common], help="all stages in order")
    p.add_argument("--cold-start", action="store_true", help="skip pre-training")
    return parser


def _effective_config(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed", "must be non-negative")
        cfg.seed = args.seed
    if args.runs is not None:
        if args.runs < 1:
            raise ConfigError("--runs", "must be >= 1")
        cfg.design["n_runs"] = args.runs
    if getattr(args, "cold_start", False):
        cfg.train["cold_start"] = True
    return cfg


def _load_policy(args, out):
    path = Path(args.policy) if getattr(args, "policy", None) else out / "policy.json"
    if not path.is_file():
        raise ConfigError("--policy", f"policy not found: {path}")
    try:
        return policy_net.load(path)
    except PolicyFormatError as exc:
        raise ConfigError("--policy", f"{path}: {exc}") from None


def _load_solution(args, out):
    path = Path(args.design) if getattr(args, "design", None) else out / "design.json"
    if not path.is_file():
        raise ConfigError("--design", f"design not found: {path}")
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        return solution_from_dict(payload)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError("--design", f"{path}: unreadable design file ({exc})") from None


# -- stages ---------------------------------------------------------------------------


def run_pretrain(cfg, out, say):
    policy, losses = stage_pretrain(cfg)
    policy_net.save(policy, out / "policy.json")
    write_csv(out / "pretrain.csv", ("iter", "loss"), [(i, float(v)) for i, v in enumerate(losses)])
    say(f"pre-trained: loss {losses[0]:.4g} -> {losses[-1]:.4g}")
    return policy


def run_train(cfg, out, say, policy=None):
    policy, report = stage_train(cfg, policy, progress=say)
    policy_net.save(policy, out / "policy.json")
    write_csv(out / "train.csv", report.header, report.rows())
    write_json(out / "train_summary.json", dict(report.summary(), wall_clock_s=report.wall_clock))
    say(f"trained {len(report.epochs)} epochs in {report.wall_clock:.1f} s")
    return policy


def run_design(cfg, out, say, policy):
    try:
        sol = stage_design(cfg, policy)
    except InfeasibleDesignError as exc:
        write_json(out / "design.json", {"feasible": False, "message": str(exc), "report": exc.report})
        say(f"infeasible: {exc}", error=True)
        return None
    write_json(out / "design.json", sol.to_dict())
    extra = f", k={sol.k}" if sol.k is not None else ""
    say(f"design: objective {sol.objective_value:.6g}{extra}, feasible={sol.feasible}")
    return sol


def run_evaluate(cfg, out, say, policy, solution):
    report = stage_evaluate(cfg, policy, solution)
    report.write(out)
    s = report.summary()
    line = f"evaluated {s['n_runs']} runs: mean error {s['policy']['mean_err']:.4g}"
    if "pd" in s:
        line += f" (PD {s['pd']['mean_err']:.4g})"
    say(line)
    return report


def _dispatch(args, cfg, out, say):
    cmd = args.command
    write_json(out / "config.json", cfg.to_dict())
    if cmd == "pretrain":
        run_pretrain(cfg, out, say)
        return EXIT_OK
    if cmd in ("train", "pipeline"):
        if cfg.train["cold_start"]:
            policy = cold_start_policy(cfg)
        elif cmd == "pipeline":
            policy = run_pretrain(cfg, out, say)
        else:
            policy = _load_policy(args, out)
        policy = run_train(cfg, out, say, policy)
        if cmd == "train":
            return EXIT_OK
    if cmd == "design":
        policy = _load_policy(args, out)
    if cmd in ("design", "pipeline"):
        sol = run_design(cfg, out, say, policy)
        if sol is None or not sol.feasible:
            return EXIT_INFEASIBLE
        if cmd == "design":
            return EXIT_OK
    if cmd == "evaluate":
        policy = _load_policy(args, out)
        sol = _load_solution(args, out)
        problem = check_solution_matches(cfg, sol)
        if problem:
            raise ConfigError("--design", problem)
        if not sol.feasible:
            say("design is infeasible; nothing to evaluate", error=True)
            return EXIT_INFEASIBLE
    run_evaluate(cfg, out, say, policy, sol)
    return EXIT_OK


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG

    def say(msg, error=False):
        if error or not args.quiet:
            print(msg, file=sys.stderr if error else sys.stdout)

    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _effective_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        return _dispatch(args, cfg, out, say)
    except ConfigError as exc:
        print(f"bilevel-rl: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
