"""Multi-objective reward: task reward gated on correctness, quadratic
latency reward over a decaying band, and their composition.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RewardConfig:
    task_reward: float = 30.0          # paid per correctly classified sample
    clamp_latency_reward: bool = True  # keep the quadratic inside [0, 1]
    static_mode: bool = False          # ablation: pin bounds at their final values

    def __post_init__(self):
        if self.task_reward <= 0:
            raise ValueError(f"task_reward must be > 0, got {self.task_reward}")


@dataclass(frozen=True)
class RewardSchedule:
    u0: float
    u_final: float
    l0: float
    l_final: float
    total_epochs: int
    static: bool = False

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ValueError(f"total_epochs must be >= 1, got {self.total_epochs}")
        if self.u0 < self.u_final or self.l0 < self.l_final:
            raise ValueError("bounds must be non-increasing over time")
        for t in (0, self.total_epochs):
            u, lo = _interp(self, t)
            if u <= lo:
                raise ValueError(f"upper bound must stay above lower bound (epoch {t}: {u} <= {lo})")


def _interp(schedule: RewardSchedule, t: int) -> tuple[float, float]:
    frac = min(max(t, 0), schedule.total_epochs) / schedule.total_epochs
    u = schedule.u0 + (schedule.u_final - schedule.u0) * frac
    lo = schedule.l0 + (schedule.l_final - schedule.l0) * frac
    return u, lo


def bounds_at(schedule: RewardSchedule, t: int) -> tuple[float, float]:
    """Linearly interpolated (U_t, L_t); static mode pins both at their finals."""
    if schedule.static:
        return schedule.u_final, schedule.l_final
    return _interp(schedule, t)


def init_bounds(
    mean_controller_latency_ms: float,
    reference_latency_ms: float,
    total_epochs: int,
    l0: float = 0.0,
    l_final: float = 0.0,
    static_mode: bool = False,
) -> RewardSchedule:
    """Start the band at twice the untrained controller's mean estimated
    latency and close it down to half the reference architecture's latency.

    The caller supplies `mean_controller_latency_ms` (mean estimated latency
    over architectures sampled from the current controller) so this stays a
    pure function; see orchestrator.sample_controller_latency.
    """
    if reference_latency_ms <= 0:
        raise ValueError(f"reference latency must be > 0, got {reference_latency_ms}")
    if mean_controller_latency_ms <= 0:
        raise ValueError(f"mean sampled latency must be > 0, got {mean_controller_latency_ms}")
    u0 = 2.0 * mean_controller_latency_ms
    u_final = reference_latency_ms / 2.0
    if u_final >= u0:
        log.warning(
            "degenerate schedule: final upper bound %.6f >= initial %.6f; holding constant at the initial value",
            u_final, u0,
        )
        u_final = u0
    return RewardSchedule(u0, u_final, l0, l_final, total_epochs, static=static_mode)


def latency_reward(z_ms: float, upper: float, lower: float, clamp: bool = True) -> float:
    """Quadratic band reward, 1 at the midpoint and 0 at both bounds."""
    if upper <= lower:
        raise ValueError(f"upper bound {upper} must exceed lower bound {lower}")
    gamma = ((upper - lower) / 2.0) ** 2
    raw = (upper - z_ms) * (z_ms - lower) / gamma
    if not clamp:
        return raw
    return min(max(raw, 0.0), 1.0)


def latency_reward_batch(z_ms: np.ndarray, upper: float, lower: float, clamp: bool = True) -> np.ndarray:
    if upper <= lower:
        raise ValueError(f"upper bound {upper} must exceed lower bound {lower}")
    gamma = ((upper - lower) / 2.0) ** 2
    raw = (upper - z_ms) * (z_ms - lower) / gamma
    return np.clip(raw, 0.0, 1.0) if clamp else raw


def task_reward(logits: np.ndarray, label: int, config: RewardConfig) -> float:
    """Pays `task_reward` when argmax(logits) == label (ties -> lowest index)."""
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    return config.task_reward if int(np.argmax(logits)) == int(label) else 0.0


def task_reward_batch(logits: np.ndarray, labels: np.ndarray, config: RewardConfig) -> np.ndarray:
    correct = np.argmax(logits, axis=1) == np.asarray(labels)
    return np.where(correct, config.task_reward, 0.0)


def combine(r_task: float, r_latency: float) -> float:
    """Latency reward discounts the task reward only when the task reward is positive."""
    return r_task * r_latency if r_task > 0 else r_task


def combine_batch(r_task: np.ndarray, r_latency: np.ndarray) -> np.ndarray:
    return np.where(r_task > 0, r_task * r_latency, r_task)
