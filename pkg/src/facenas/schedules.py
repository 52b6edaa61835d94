"""Learning-rate schedules and the momentum / plain SGD optimizers."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, DimensionError, Tensor


@dataclass
class ScheduleConfig:
    lr_min: float = 1e-4
    lr_max: float = 0.1
    T_i: float = 80.0
    warmup_epochs: int = 20
    # optional warm restarts: list of (T_i, lr_max) periods run back to back
    restarts: list = field(default_factory=list)

    def __post_init__(self):
        if not 0 <= self.lr_min < self.lr_max:
            raise ContractError(f"need 0 <= lr_min < lr_max, got {self.lr_min}, {self.lr_max}")
        if self.T_i < 1:
            raise ContractError(f"T_i must be >= 1, got {self.T_i}")


def cosine_mod_lr(cfg: ScheduleConfig, T_cur: float) -> float:
    """Cosine annealing with the exponential reshaping 2^(1 + cos-term) - 2, halved."""
    if not 0 <= T_cur <= cfg.T_i:
        raise ContractError(f"T_cur={T_cur} outside [0, {cfg.T_i}]")
    expo = 0.5 * (1.0 + math.cos(math.pi * T_cur / cfg.T_i)) + 1.0
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (2.0 ** expo - 2.0) / 2.0


def standard_cosine_lr(cfg: ScheduleConfig, T_cur: float) -> float:
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + math.cos(math.pi * T_cur / cfg.T_i))


def restart_lr(cfg: ScheduleConfig, t: float) -> float:
    """Walk a list of warm-restart periods; past the last period the floor holds."""
    periods = cfg.restarts or [(cfg.T_i, cfg.lr_max)]
    for T_i, lr_max in periods:
        if t <= T_i:
            return cosine_mod_lr(ScheduleConfig(cfg.lr_min, lr_max, T_i, 0), t)
        t -= T_i
    return cfg.lr_min


def warmup_then_cosine(cfg: ScheduleConfig, epoch: float, total_epochs: float) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    w = cfg.warmup_epochs
    if epoch < w:
        return cfg.lr_max * epoch / w
    span = max(total_epochs - w, 1)
    period = ScheduleConfig(cfg.lr_min, cfg.lr_max, span, 0, cfg.restarts)
    return restart_lr(period, min(epoch - w, span))


def piecewise_controller_lr(epoch: int, start: float = 0.1, floor: float = 1e-4,
                            every: int = 20, factor: float = 10.0) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return max(start / factor ** (epoch // every), floor)


@dataclass
class OptimState:
    beta: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict = field(default_factory=dict)


def momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: OptimState, lr: float,
                  keys: Sequence | None = None) -> None:
    """v <- beta*v + (g + wd*w);  w <- w - lr*v.

    Velocities are keyed by ``keys`` (default: position), so a caller updating
    varying subsets of a parameter store passes stable names.
    """
    if len(params) != len(grads):
        raise DimensionError(f"{len(params)} params but {len(grads)} grads")
    keys = range(len(params)) if keys is None else keys
    for i, p, g in zip(keys, params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"param {i}: grad shape {g.shape} != param shape {p.shape}")
        v = state.velocity.get(i)
        if v is None:
            v = np.zeros_like(p.data)
        d = g + state.weight_decay * p.data if state.weight_decay else g
        v = state.beta * v + d
        state.velocity[i] = v
        p.data -= lr * v


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], lr: float) -> None:
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"grad shape {g.shape} != param shape {p.shape}")
        p.data -= lr * g
