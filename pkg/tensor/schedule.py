import math
from dataclasses import dataclass

from utils.constants import CYCLE_ITERS, PEAK_LR, WARMUP_ITERS, WARMUP_START_LR
from utils.errors import ConfigError


@dataclass(frozen=True)
class LrSchedule:
    """Cyclic schedule: linear warm-up then cosine annealing, repeated.

    ``total_iters`` is the cycle length; each cycle warms up from
    ``warmup_start`` to ``peak`` over ``warmup_iters`` and anneals back toward
    ``warmup_start`` over the rest.
    """

    warmup_iters: int = WARMUP_ITERS
    warmup_start: float = WARMUP_START_LR
    peak: float = PEAK_LR
    total_iters: int = CYCLE_ITERS
    mode: str = "cyclic"

    def __post_init__(self):
        if self.mode not in ("cyclic", "constant"):
            raise ConfigError(f"unknown schedule mode: {self.mode!r}")
        if not 0 <= self.warmup_iters < self.total_iters:
            raise ConfigError("warmup_iters must be in [0, total_iters)")


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    """Learning rate for a (0-based) iteration."""
    if iteration < 0:
        raise ConfigError(f"iteration must be non-negative, got {iteration}")
    if schedule.mode == "constant":
        return schedule.peak

    t = iteration % schedule.total_iters
    start, peak = schedule.warmup_start, schedule.peak
    if t < schedule.warmup_iters:
        return start + (peak - start) * t / schedule.warmup_iters
    phase = (t - schedule.warmup_iters) / (schedule.total_iters - schedule.warmup_iters)
    return start + (peak - start) * 0.5 * (1.0 + math.cos(math.pi * phase))
