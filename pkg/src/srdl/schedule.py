"""Learning-rate programs.

A step-decay program multiplies the base rate by ``drop_factor`` after each
configured drop point. Drop points are fractions of the horizon; the drop
takes effect on epoch ceil(p * horizon) + 1, i.e. after the 50%/75% epoch has
completed. With the defaults (drops of 0.1 at 50% and 75%) and horizon 200
the rate is 0.1 on epochs 1..100, 0.01 on 101..150 and 0.001 on 151..200.

Two-stage training can run the program in one of two ways:
  * stage-complete: each stage gets the full program compressed into its own
    length, restarting from the base rate at the stage boundary;
  * stage-incomplete: one program spans the whole run and stage 2 simply
    continues where stage 1 left off (no reset).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

from .errors import ContractViolation

MODE_FULL_RUN = "full-run"
MODE_STAGE_COMPLETE = "stage-complete"


@dataclass(frozen=True)
class ScheduleConfig:
    """Step-decay program: base rate, horizon, drop factor and drop points."""

    base_lr: float
    horizon: int
    drop_factor: float = 0.1
    drop_points: tuple[float, ...] = (0.5, 0.75)
    mode: str = MODE_FULL_RUN

    def __post_init__(self):
        object.__setattr__(self, "drop_points", tuple(float(p) for p in self.drop_points))
        if self.base_lr <= 0:
            raise ContractViolation(f"base learning rate must be positive, got {self.base_lr}")
        if self.horizon < 1:
            raise ContractViolation(f"horizon must be >= 1, got {self.horizon}")
        if not 0 < self.drop_factor <= 1:
            raise ContractViolation(f"drop factor must be in (0, 1], got {self.drop_factor}")
        if any(not 0 < p < 1 for p in self.drop_points):
            raise ContractViolation(f"drop points must lie strictly in (0, 1): {self.drop_points}")
        if list(self.drop_points) != sorted(set(self.drop_points)):
            raise ContractViolation(f"drop points must be strictly increasing: {self.drop_points}")
        if self.mode not in (MODE_FULL_RUN, MODE_STAGE_COMPLETE):
            raise ContractViolation(f"unknown schedule mode {self.mode!r}")

    def with_horizon(self, horizon: int) -> "ScheduleConfig":
        return replace(self, horizon=horizon)


def lr_at(cfg: ScheduleConfig, t: int) -> float:
    """Learning rate for epoch ``t`` (1-based) of the program's horizon."""
    if not 1 <= t <= cfg.horizon:
        raise ContractViolation(f"epoch {t} outside 1..{cfg.horizon}")
    drops = sum(1 for p in cfg.drop_points if t > math.ceil(p * cfg.horizon))
    return cfg.base_lr * cfg.drop_factor**drops


def stage_complete_lr_at(cfg: ScheduleConfig, t_within_stage: int) -> float:
    """Rate for an epoch inside one stage running its own complete program.

    ``cfg.horizon`` must already be the stage length; both stages restart the
    program from the base rate.
    """
    return lr_at(cfg, t_within_stage)


def stage_lengths(total_epochs: int) -> tuple[int, int]:
    """Split a run into two stages; stage 1 gets the extra epoch when odd."""
    if total_epochs < 2:
        raise ContractViolation(f"two-stage training needs at least 2 epochs, got {total_epochs}")
    first = math.ceil(total_epochs / 2)
    return first, total_epochs - first


def two_stage_lr(
    cfg: ScheduleConfig, total_epochs: int, stage: int, t_within_stage: int, stage_complete: bool
) -> float:
    """Rate for epoch ``t_within_stage`` of ``stage`` (1 or 2) of a two-stage run.

    Stage-complete mode runs a full program per stage; stage-incomplete mode
    slices one ``total_epochs``-long program across both stages.
    """
    if stage not in (1, 2):
        raise ContractViolation(f"stage must be 1 or 2, got {stage}")
    len1, len2 = stage_lengths(total_epochs)
    length = len1 if stage == 1 else len2
    if not 1 <= t_within_stage <= length:
        raise ContractViolation(f"epoch {t_within_stage} outside stage of length {length}")
    if stage_complete:
        return lr_at(cfg.with_horizon(length), t_within_stage)
    full = cfg.with_horizon(total_epochs)
    offset = 0 if stage == 1 else len1
    return lr_at(full, offset + t_within_stage)
