"""Progressive pseudo-label confidence: blend C_det toward C_comb over training."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Iterable

from .detection import Detection, Score


class Mode(str, enum.Enum):
    DET_ONLY = "det_only"
    COMB_ONLY = "comb_only"
    DET_TO_COMB_LINEAR = "det_to_comb_linear"
    COMB_TO_DET_LINEAR = "comb_to_det_linear"
    DET_TO_COMB_DELTA = "det_to_comb_delta"
    COMB_TO_DET_DELTA = "comb_to_det_delta"

    @property
    def linear(self) -> bool:
        return self in (Mode.DET_TO_COMB_LINEAR, Mode.COMB_TO_DET_LINEAR)

    @property
    def reversed(self) -> bool:
        return self in (Mode.COMB_TO_DET_LINEAR, Mode.COMB_TO_DET_DELTA)


@dataclass(frozen=True)
class Schedule:
    total_epochs: int
    batches_per_epoch: int
    alpha: float = 5.0
    mode: Mode = Mode.DET_TO_COMB_DELTA

    def __post_init__(self):
        if self.total_epochs < 1 or self.batches_per_epoch < 1:
            raise ValueError("total_epochs and batches_per_epoch must be >= 1")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        object.__setattr__(self, "mode", Mode(self.mode))

    @property
    def total_iterations(self) -> int:
        return self.total_epochs * self.batches_per_epoch

    def weight(self, t: int) -> float:
        """Blend weight at iteration ``t``: r for linear modes, delta otherwise."""
        r = progress_ratio(t, self)
        return r if self.mode.linear else shifting_weight(r, self.alpha)

    def selector(self, t: int) -> Score:
        w = self.weight(t)
        mode = self.mode
        return lambda d: blended_confidence(d, w, mode)


class Clock:
    """Global adaptation iteration counter, owned by the training loop."""

    def __init__(self, t: int = 0):
        self.t = t

    def advance(self, n: int = 1) -> int:
        if n < 0:
            raise ValueError("clock cannot run backwards")
        self.t += n
        return self.t


def progress_ratio(clock: Clock | int, sched: Schedule) -> float:
    t = clock.t if isinstance(clock, Clock) else clock
    total = sched.total_iterations
    if not 0 <= t <= total:
        raise ValueError(f"iteration {t} outside [0, {total}]")
    return t / total


def shifting_weight(r: float, alpha: float = 5.0) -> float:
    # 2 / (1 + exp(-a r)) - 1 == tanh(a r / 2); tanh avoids cancellation near 0
    return math.tanh(alpha * r / 2.0)


def blended_confidence(det: Detection, delta: float, mode: Mode | str = Mode.DET_TO_COMB_DELTA) -> float:
    mode = Mode(mode)
    if mode is Mode.DET_ONLY:
        return det.c_det
    if mode is Mode.COMB_ONLY:
        return det.c_comb
    if mode.reversed:
        return (1.0 - delta) * det.c_comb + delta * det.c_det
    return (1.0 - delta) * det.c_det + delta * det.c_comb


def filter_pseudo(
    dets: Iterable[Detection],
    c_th: float = 0.25,
    delta: float = 0.0,
    mode: Mode | str = Mode.DET_TO_COMB_DELTA,
) -> list[Detection]:
    """Keep post-NMS detections whose blended confidence strictly exceeds ``c_th``."""
    mode = Mode(mode)
    return [d for d in dets if blended_confidence(d, delta, mode) > c_th]
