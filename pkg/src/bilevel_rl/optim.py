"""Adam, step-decayed learning rate and MSE loss."""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ContractError, InputError


class Direction(str, Enum):
    ASCEND = "ascend"
    DESCEND = "descend"


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: np.ndarray = None
    v: np.ndarray = None
    step_count: int = 0

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractError("lr must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError("beta1 and beta2 must lie in [0, 1)")


def adam_step(state, params, grads, direction=Direction.DESCEND):
    """One bias-corrected Adam update of ``params`` (in place); returns ``params``.

    ``Direction.ASCEND`` moves along ``+grads`` (policy-gradient ascent).
    """
    grads = np.asarray(grads, dtype=float)
    if grads.shape != params.shape:
        raise ContractError(f"gradient shape {grads.shape} does not match parameters {params.shape}")
    if not np.all(np.isfinite(grads)):
        raise InputError("non-finite gradient; update rejected")
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    if state.m.shape != params.shape:
        raise ContractError("optimizer moments do not match parameter shape")

    state.step_count += 1
    t = state.step_count
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**t)
    v_hat = state.v / (1.0 - state.beta2**t)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if Direction(direction) is Direction.ASCEND:
        params += step
    else:
        params -= step
    return params


@dataclass(frozen=True)
class LrSchedule:
    alpha0: float = 1e-3
    decay: float = 0.99
    start_epoch: int = 0

    def __post_init__(self):
        if not self.alpha0 > 0:
            raise ContractError("alpha0 must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ContractError("decay must lie in (0, 1]")
        if self.start_epoch < 0:
            raise ContractError("start_epoch must be >= 0")


def schedule_lr(sched, epoch):
    """Learning rate in force during ``epoch`` (0-based).

    The rate is multiplied by ``decay`` at the end of every epoch
    ``m >= start_epoch``, so epoch ``m`` sees ``max(0, m - start_epoch)``
    decays.
    """
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    n_decays = max(0, epoch - sched.start_epoch)
    return sched.alpha0 * sched.decay**n_decays


def mse_loss(pred, target):
    """Mean squared error and its gradient with respect to ``pred``."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ContractError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.size == 0:
        raise ContractError("mse_loss of empty input")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / pred.size
