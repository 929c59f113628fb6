"""Run configuration: JSON in, typed sections with defaults filled, JSON out.

Every key is optional except ``case``.  Defaults depend on the case and are
listed in ``DEFAULTS``; unknown keys and out-of-range values raise
:class:`ConfigError` naming the dotted key (``train.gamma``).
"""

import copy
import json
import math
from dataclasses import dataclass

from .design import CSTR_BOUNDS, TANK_BOUNDS
from .environments.cstr import CstrParams
from .errors import ConfigError

CASES = ("tank", "cstr")

_COMMON_TRAIN = {
    "n_epochs": 1000,
    "n_episodes": 20,
    "gamma": 1.0,
    "alpha0": 1e-3,
    "decay": 0.99,
    "start_epoch": None,
    "cold_start": False,
}

_COMMON_DESIGN = {
    "epsilon": 1.0,
    "eval_noise_pct": 0.0,
    "n_runs": 1000,
    "mc_mode": "mean_action",
}

DEFAULTS = {
    "tank": {
        "seed": 0,
        "env": {"t_final": 1.0, "n_steps": 100, "substeps": 1, "noise_pct": 0.0, "params": {}},
        "policy": {"hidden": [20, 20], "init_std_frac": 0.1},
        "pretrain": {"kp": 1.0, "kd": 0.05, "target": None, "offset": 0.0, "n_demos": 100,
                     "n_iter": 500, "lr": 1e-3},
        "train": dict(_COMMON_TRAIN, ranges={"f_nom": [2.0, 6.0], "f_dev": [0.0, 5.0], "v_tank": [6.0, 12.0]},
                      v0_spread=0.05),
        "design": dict(_COMMON_DESIGN, bounds={k: list(v) for k, v in TANK_BOUNDS.items()},
                       tol=0.01, n_starts=4, max_evals=300, mc_noise_pct=2.0),
    },
    "cstr": {
        "seed": 0,
        "env": {"t_final": 100.0, "n_steps": 100, "substeps": 20, "noise_pct": 0.0, "params": {}},
        "policy": {"hidden": [20, 20], "init_std_frac": 0.1},
        "pretrain": {"kp": 60.0, "kd": 0.0, "target": 442.0, "offset": 442.0, "n_demos": 100,
                     "n_iter": 1000, "lr": 1e-2},
        "train": dict(_COMMON_TRAIN, ranges={"v": [600.0, 1200.0], "m_nom": [6.0, 14.0], "m_dev": [0.0, 8.0],
                                             "ca0_nom": [0.5, 1.0], "ca0_dev": [0.0, 0.5]},
                      v0_spread=0.0),
        "design": dict(_COMMON_DESIGN, bounds={k: list(v) for k, v in CSTR_BOUNDS.items()},
                       err_max=100.0, k_max=100, k_step=1, mesh0=0.25, mesh_min=1e-3, mc_noise_pct=0.0),
    },
}

_PARAM_KEYS = ("rho", "k0", "ea", "r_gas", "dh_rxn", "cp", "ua", "t0", "t_max", "th_min", "th_max",
               "t_init", "ca_init_factor")


# -- checks -------------------------------------------------------------------------


def _num(key, value, *, lo=None, hi=None, lo_open=False, integer=False, nullable=False):
    if value is None and nullable:
        return None
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(key, f"expected a number, got {type(value).__name__}")
    if integer:
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(key, "expected an integer")
        value = int(value)
    else:
        value = float(value)
        if not math.isfinite(value):
            raise ConfigError(key, "must be finite")
    if lo is not None and (value <= lo if lo_open else value < lo):
        raise ConfigError(key, f"must be {'>' if lo_open else '>='} {lo}, got {value}")
    if hi is not None and value > hi:
        raise ConfigError(key, f"must be <= {hi}, got {value}")
    return value


def _bool(key, value):
    if not isinstance(value, bool):
        raise ConfigError(key, "expected true or false")
    return value


def _ranges(key, value, allowed):
    if not isinstance(value, dict):
        raise ConfigError(key, "expected an object of [min, max] pairs")
    out = {}
    for name, pair in value.items():
        sub = f"{key}.{name}"
        if name not in allowed:
            raise ConfigError(sub, f"unknown variable (expected one of {sorted(allowed)})")
        if not isinstance(pair, (list, tuple)) or len(pair) != 2:
            raise ConfigError(sub, "expected [min, max]")
        lo, hi = (_num(sub, v) for v in pair)
        if lo > hi:
            raise ConfigError(sub, "min exceeds max")
        out[name] = [lo, hi]
    missing = set(allowed) - set(out)
    if missing:
        raise ConfigError(key, f"missing {sorted(missing)}")
    return out


def _merge(key, defaults, raw):
    if not isinstance(raw, dict):
        raise ConfigError(key, "expected an object")
    for k in raw:
        if k not in defaults:
            raise ConfigError(f"{key}.{k}" if key else k, "unknown key")
    out = copy.deepcopy(defaults)
    for k, v in raw.items():
        if isinstance(defaults[k], dict) and k not in ("ranges", "bounds", "params"):
            out[k] = _merge(f"{key}.{k}" if key else k, defaults[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    case: str
    seed: int
    env: dict
    policy: dict
    pretrain: dict
    train: dict
    design: dict

    def to_dict(self):
        return {
            "case": self.case,
            "seed": self.seed,
            "env": copy.deepcopy(self.env),
            "policy": copy.deepcopy(self.policy),
            "pretrain": copy.deepcopy(self.pretrain),
            "train": copy.deepcopy(self.train),
            "design": copy.deepcopy(self.design),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def cstr_params(self):
        return CstrParams(**self.env["params"])


def validate_config(raw):
    """Typed configuration with every default filled in."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "expected a JSON object")
    case = raw.get("case", "tank")
    if case not in CASES:
        raise ConfigError("case", f"expected one of {list(CASES)}, got {case!r}")
    body = {k: v for k, v in raw.items() if k != "case"}
    cfg = _merge("", DEFAULTS[case], body)

    cfg["seed"] = _num("seed", cfg["seed"], lo=0, integer=True)

    env = cfg["env"]
    env["t_final"] = _num("env.t_final", env["t_final"], lo=0, lo_open=True)
    env["n_steps"] = _num("env.n_steps", env["n_steps"], lo=1, integer=True)
    env["substeps"] = _num("env.substeps", env["substeps"], lo=1, integer=True)
    env["noise_pct"] = _num("env.noise_pct", env["noise_pct"], lo=0)
    if not isinstance(env["params"], dict):
        raise ConfigError("env.params", "expected an object")
    if case == "tank" and env["params"]:
        raise ConfigError("env.params", "the tank case takes no physical parameters")
    for k, v in env["params"].items():
        if k not in _PARAM_KEYS:
            raise ConfigError(f"env.params.{k}", "unknown key")
        env["params"][k] = _num(f"env.params.{k}", v)
    if case == "cstr":
        try:
            CstrParams(**env["params"])
        except ValueError as exc:
            raise ConfigError("env.params", str(exc)) from None

    pol = cfg["policy"]
    if not isinstance(pol["hidden"], list) or not pol["hidden"]:
        raise ConfigError("policy.hidden", "expected a non-empty list of widths")
    pol["hidden"] = [_num(f"policy.hidden[{i}]", w, lo=1, integer=True) for i, w in enumerate(pol["hidden"])]
    pol["init_std_frac"] = _num("policy.init_std_frac", pol["init_std_frac"], lo=0, lo_open=True)

    pre = cfg["pretrain"]
    pre["kp"] = _num("pretrain.kp", pre["kp"])
    pre["kd"] = _num("pretrain.kd", pre["kd"])
    pre["target"] = _num("pretrain.target", pre["target"], nullable=True)
    pre["offset"] = _num("pretrain.offset", pre["offset"])
    pre["n_demos"] = _num("pretrain.n_demos", pre["n_demos"], lo=1, integer=True)
    pre["n_iter"] = _num("pretrain.n_iter", pre["n_iter"], lo=0, integer=True)
    pre["lr"] = _num("pretrain.lr", pre["lr"], lo=0, lo_open=True)
    if case == "cstr" and pre["target"] is None:
        raise ConfigError("pretrain.target", "the CSTR demonstrator needs a temperature target")

    tr = cfg["train"]
    tr["n_epochs"] = _num("train.n_epochs", tr["n_epochs"], lo=0, integer=True)
    tr["n_episodes"] = _num("train.n_episodes", tr["n_episodes"], lo=1, integer=True)
    tr["gamma"] = _num("train.gamma", tr["gamma"], lo=0, hi=1)
    tr["alpha0"] = _num("train.alpha0", tr["alpha0"], lo=0, lo_open=True)
    tr["decay"] = _num("train.decay", tr["decay"], lo=0, lo_open=True, hi=1)
    tr["start_epoch"] = _num("train.start_epoch", tr["start_epoch"], lo=0, integer=True, nullable=True)
    tr["cold_start"] = _bool("train.cold_start", tr["cold_start"])
    tr["ranges"] = _ranges("train.ranges", tr["ranges"], DEFAULTS[case]["train"]["ranges"])
    tr["v0_spread"] = _num("train.v0_spread", tr["v0_spread"], lo=0, hi=1)

    des = cfg["design"]
    des["epsilon"] = _num("design.epsilon", des["epsilon"], lo=0, lo_open=True)
    des["eval_noise_pct"] = _num("design.eval_noise_pct", des["eval_noise_pct"], lo=0)
    des["n_runs"] = _num("design.n_runs", des["n_runs"], lo=1, integer=True)
    des["mc_noise_pct"] = _num("design.mc_noise_pct", des["mc_noise_pct"], lo=0)
    if des["mc_mode"] not in ("mean_action", "stochastic"):
        raise ConfigError("design.mc_mode", "expected 'mean_action' or 'stochastic'")
    des["bounds"] = _ranges("design.bounds", des["bounds"], DEFAULTS[case]["design"]["bounds"])
    if case == "tank":
        des["tol"] = _num("design.tol", des["tol"], lo=0, lo_open=True)
        des["n_starts"] = _num("design.n_starts", des["n_starts"], lo=1, integer=True)
        des["max_evals"] = _num("design.max_evals", des["max_evals"], lo=1, integer=True)
    else:
        des["err_max"] = _num("design.err_max", des["err_max"], lo=0, lo_open=True)
        des["k_max"] = _num("design.k_max", des["k_max"], lo=0, integer=True)
        des["k_step"] = _num("design.k_step", des["k_step"], lo=1, integer=True)
        des["mesh0"] = _num("design.mesh0", des["mesh0"], lo=0, lo_open=True, hi=1)
        des["mesh_min"] = _num("design.mesh_min", des["mesh_min"], lo=0, lo_open=True)

    return RunConfig(case=case, **cfg)


def load_config(path):
    """Read and validate a config file; a missing file raises ``ConfigError``."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError("--config", f"config file not found: {path}") from None
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"{path} is not valid JSON ({exc.msg}, line {exc.lineno})") from None
    return validate_config(raw)
