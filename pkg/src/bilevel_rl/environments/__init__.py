from .cstr import CSTR_FREQ, CstrDesign, CstrEnv, CstrParams, cstr_reward, cstr_step, feed_concentration, feed_flow
from .grid import CSTR_GRID, TANK_GRID, TimeGrid
from .integrators import rk4_integrate, rk4_step
from .rollout import (
    BatchResult,
    Mode,
    ObsStats,
    Trajectory,
    denormalize_obs,
    episode_rng,
    normalize_obs,
    rollout,
    rollout_batch,
    simulate,
)
from .tank import TANK_FREQ, StepResult, TankDesign, TankEnv, inflow, tank_step

__all__ = [
    "BatchResult", "CSTR_FREQ", "CSTR_GRID", "CstrDesign", "CstrEnv", "CstrParams", "Mode", "ObsStats",
    "StepResult", "TANK_FREQ", "TANK_GRID", "TankDesign", "TankEnv", "TimeGrid", "Trajectory",
    "cstr_reward", "cstr_step", "denormalize_obs", "episode_rng", "feed_concentration", "feed_flow",
    "inflow", "normalize_obs", "rk4_integrate", "rk4_step", "rollout", "rollout_batch", "simulate",
    "tank_step",
]
