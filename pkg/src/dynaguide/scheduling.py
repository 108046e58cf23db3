"""Dynamic guidance scheduling: stage weights, Polyak scale, recurrence count.

Sampling splits into three stages by normalized time u = t/T: an early
semantic stage (all weight on the alignment term), a blended stage where
the weight tracks how fast the clean prediction is still changing, and a
late refinement stage (all weight on the preference term). The blend is

    w = 1 - exp(-k * ||z0_now - z0_prev|| / ||z0_prev||)

so large relative change keeps the semantic term active. The recurrence
count for time travel is driven by the guidance gradient norm,
r_t = min(floor(h_t * ||g_t||), r_max), computed once per outer step.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import torch

from .errors import ConfigError

REL_CHANGE_NORM_FLOOR = 1e-12


class Stage(str, enum.Enum):
    SEMANTIC = "semantic"
    BLENDED = "blended"
    REFINE = "refine"


@dataclass(frozen=True)
class StageConfig:
    t1_frac: float = 0.8
    t2_frac: float = 0.5
    k: float = 10.0
    eta: dict[Stage, float] = field(
        default_factory=lambda: {Stage.SEMANTIC: 0.5, Stage.BLENDED: 1.0, Stage.REFINE: 1.0}
    )
    h: float = 1.0
    r_max: int = 10
    blend_baseline: str = "latest"  # or "pre_recurrence"

    def __post_init__(self):
        if not 0.0 < self.t2_frac < self.t1_frac < 1.0:
            raise ConfigError(
                f"need 1 > t1_frac > t2_frac > 0, got t1_frac={self.t1_frac}, "
                f"t2_frac={self.t2_frac}"
            )
        if self.k <= 0:
            raise ConfigError(f"k must be positive, got {self.k}")
        if self.h < 0:
            raise ConfigError(f"h must be >= 0, got {self.h}")
        if self.r_max < 0:
            raise ConfigError(f"r_max must be >= 0, got {self.r_max}")
        if self.blend_baseline not in ("latest", "pre_recurrence"):
            raise ConfigError(f"unknown blend_baseline {self.blend_baseline!r}")
        missing = [s for s in Stage if s not in self.eta]
        if missing:
            raise ConfigError(f"eta table missing stages {missing}")
        for s, v in self.eta.items():
            if v < 0:
                raise ConfigError(f"eta[{s.value}] must be >= 0, got {v}")

    def eta_for(self, stage: Stage) -> float:
        return self.eta[stage]


@dataclass(frozen=True)
class WeightDecision:
    w_a: float
    w_r: float
    stage: Stage
    rel_change: float | None = None
    event: str | None = None


def stage_of(t: int, T: int, config: StageConfig) -> Stage:
    u = t / T
    if u >= config.t1_frac:
        return Stage.SEMANTIC
    if u >= config.t2_frac:
        return Stage.BLENDED
    return Stage.REFINE


def stage_weights(
    t: int,
    T: int,
    z0_now: torch.Tensor | None,
    z0_prev: torch.Tensor | None,
    config: StageConfig,
) -> WeightDecision:
    """Per-step objective weights (w_a, w_r), always summing to 1."""
    if not 1 <= t <= T:
        raise ConfigError(f"t must be in 1..{T}, got {t}")
    stage = stage_of(t, T, config)
    if stage is Stage.SEMANTIC:
        return WeightDecision(1.0, 0.0, stage)
    if stage is Stage.REFINE:
        return WeightDecision(0.0, 1.0, stage)
    if z0_now is None or z0_prev is None:
        raise ConfigError("blended stage needs z0_now and z0_prev")
    prev_norm = float(torch.linalg.vector_norm(z0_prev))
    event = None
    if prev_norm < REL_CHANGE_NORM_FLOOR:
        rel = 0.0
        event = "z0_prev norm below floor; rel_change forced to 0"
    else:
        rel = float(torch.linalg.vector_norm(z0_now - z0_prev)) / prev_norm
    # the formula never reaches 1 in exact arithmetic; keep that true in floats
    w = min(1.0 - math.exp(-config.k * rel), math.nextafter(1.0, 0.0))
    return WeightDecision(w, 1.0 - w, stage, rel_change=rel, event=event)


def polyak_scale(eta_t: float, score_norm: float, grad_norm: float) -> float:
    """The scalar multiplying g_t in the guided update."""
    if grad_norm <= 0:
        raise ConfigError(f"grad_norm must be positive, got {grad_norm}")
    return eta_t * score_norm / grad_norm**2


def recurrence_count(h_t: float, grad_norm: float, r_max: int) -> int:
    """Dynamic time-travel budget for one outer step."""
    if h_t < 0:
        raise ConfigError(f"h_t must be >= 0, got {h_t}")
    if r_max < 0:
        raise ConfigError(f"r_max must be >= 0, got {r_max}")
    if not math.isfinite(grad_norm) or grad_norm < 0:
        raise ConfigError(f"grad_norm must be a finite nonnegative real, got {grad_norm}")
    return min(int(math.floor(h_t * grad_norm)), r_max)
