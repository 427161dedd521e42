"""Adaptive modality balancing: dynamic KD weights and gradient ratios.

Two blocks drive the balancing. Per-iteration loss-ratio weights clamp the
influence of each teacher, and from the second epoch on a per-student
gradient ratio compares teacher progress against student progress
(relative to epoch-1 baseline losses) and scales the optimizer step.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .errors import ParameterError, StateError

log = logging.getLogger(__name__)


@dataclass
class AmbConfig:
    gamma: float = 3.0
    r_min: float = 0.1
    r_max: float = 10.0
    alpha_min: float = 0.1
    alpha_max: float = 10.0
    beta_min: float = 0.1
    beta_max: float = 10.0
    ratio_floor: float = 1e-3

    def validate(self) -> None:
        if self.gamma <= 0:
            raise ParameterError(f"amb.gamma must be > 0, got {self.gamma}")
        if self.ratio_floor <= 0:
            raise ParameterError(f"amb.ratio_floor must be > 0, got {self.ratio_floor}")
        for lo, hi, key in (
            (self.r_min, self.r_max, "amb.r_min/r_max"),
            (self.alpha_min, self.alpha_max, "amb.alpha_min/alpha_max"),
            (self.beta_min, self.beta_max, "amb.beta_min/beta_max"),
        ):
            if not lo < hi:
                raise ParameterError(f"{key} must satisfy lower < upper, got {lo} >= {hi}")


def saturate(x: float, lo: float, hi: float) -> float:
    """Clamp x into [lo, hi]."""
    if lo >= hi:
        raise ParameterError(f"saturate bounds must satisfy lo < hi, got [{lo}, {hi}]")
    return min(max(x, lo), hi)


def dynamic_weights(ce_s: float, ce_ta: float, ce_tb: float, cfg: AmbConfig) -> tuple[float, float]:
    """Per-iteration KD weights from clamped student/teacher CE ratios."""
    floored = []
    for name, value in (("student", ce_s), ("teacher_a", ce_ta), ("teacher_b", ce_tb)):
        if value <= 0:
            log.warning(
                "nonpositive CE loss %.6g for %s; flooring at %g before weight ratio",
                value, name, cfg.ratio_floor,
            )
            value = cfg.ratio_floor
        floored.append(value)
    ce_s, ce_ta, ce_tb = floored
    alpha = saturate(ce_s / ce_ta, cfg.alpha_min, cfg.alpha_max)
    beta = saturate(ce_s / ce_tb, cfg.beta_min, cfg.beta_max)
    return alpha, beta


def progress_ratio(l_base: float, l_current: float) -> float:
    """Fractional CE reduction relative to the epoch-1 baseline.

    May be negative (regression past baseline); clamping is the caller's
    concern.
    """
    if l_base <= 0:
        raise StateError(f"baseline loss must be > 0, got {l_base}")
    return (l_base - l_current) / l_base


def dynamic_gradient_ratio(
    r_s: float, r_ta: float, r_tb: float, epoch: int, cfg: AmbConfig
) -> float:
    """Step-scale for a student given the three progress ratios.

    Epoch 1 always yields exactly 1. Afterwards each ratio is floored at
    cfg.ratio_floor (losses above baseline carry no usable progress
    signal), the teacher average is divided by the student's progress,
    raised to gamma, and clamped into [r_min, r_max].
    """
    if epoch < 1:
        raise ParameterError(f"epoch index must be >= 1, got {epoch}")
    if epoch == 1:
        return 1.0
    floor = cfg.ratio_floor
    r_s = max(r_s, floor)
    r_ta = max(r_ta, floor)
    r_tb = max(r_tb, floor)
    base = (r_ta + r_tb) / (2.0 * r_s)
    return saturate(base ** cfg.gamma, cfg.r_min, cfg.r_max)


@dataclass
class AmbState:
    """Bookkeeping for one training run.

    Epoch 1 accumulates per-branch CE means that become the fixed
    baselines; they are never refreshed afterwards. `last` keeps the most
    recent (alpha, beta, r_dg) per student for logging.
    """

    epoch: int = 0
    baselines: dict[str, float] = field(default_factory=dict)
    last: dict[str, tuple[float, float, float]] = field(default_factory=dict)
    _sums: dict[str, float] = field(default_factory=dict)
    _counts: dict[str, int] = field(default_factory=dict)

    def begin_epoch(self, epoch: int) -> None:
        if epoch < 1:
            raise ParameterError(f"epoch index must be >= 1, got {epoch}")
        self.epoch = epoch

    def observe(self, ce_by_branch: dict[str, float]) -> None:
        """Accumulate epoch-1 batch CE values toward the baselines."""
        if self.epoch != 1:
            return
        for branch, value in ce_by_branch.items():
            self._sums[branch] = self._sums.get(branch, 0.0) + value
            self._counts[branch] = self._counts.get(branch, 0) + 1

    def finalize_baselines(self) -> None:
        for branch, total in self._sums.items():
            self.baselines[branch] = total / self._counts[branch]

    def baseline(self, branch: str) -> float:
        if branch not in self.baselines:
            raise StateError(f"no epoch-1 baseline captured for branch '{branch}'")
        return self.baselines[branch]

    def record(self, student: str, alpha: float, beta: float, r_dg: float) -> None:
        self.last[student] = (alpha, beta, r_dg)
