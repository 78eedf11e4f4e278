"""Policy labels and the unsupervised look-ahead labeler."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

import numpy as np

from .scenario import PoseSample, wrap_angle


class PolicyLabel(IntEnum):
    FORWARD = 0
    YIELD = 1
    TURN_LEFT = 2
    TURN_RIGHT = 3
    LANE_CHANGE_LEFT = 4
    LANE_CHANGE_RIGHT = 5

    @property
    def slug(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, value: "str | int | PolicyLabel") -> "PolicyLabel":
        if isinstance(value, str):
            return cls[value.upper()]
        return cls(int(value))


NUM_LABELS = len(PolicyLabel)


@dataclass(frozen=True)
class LabelerConfig:
    theta_turn: float = math.radians(30.0)
    lane_width: float = 3.5
    lc_fraction: float = 0.5  # lateral threshold as a fraction of lane width
    a_yield: float = 1.0
    v_stop: float = 0.5
    heading_frames: int = 10  # history frames averaged for the lane direction

    @property
    def w_lc(self) -> float:
        return self.lc_fraction * self.lane_width


def _unwrapped_heading_change(thetas: np.ndarray) -> float:
    return float(sum(wrap_angle(b - a) for a, b in zip(thetas[:-1], thetas[1:])))


def label_window(track: Sequence[PoseSample], i: int, t_obs: int, t_pred: int,
                 config: LabelerConfig = LabelerConfig()) -> PolicyLabel:
    """Label frame `i` of a track by what happens over the next `t_pred` frames.

    Precedence is turn > lane change > yield > forward, so exactly one label fires.
    """
    if i - t_obs + 1 < 0 or i + t_pred >= len(track):
        raise ValueError(
            f"track of {len(track)} frames does not cover [{i - t_obs + 1}, {i + t_pred}]")
    seg = track[i:i + t_pred + 1]
    thetas = np.array([p.theta for p in seg])
    dtheta = _unwrapped_heading_change(thetas)
    if dtheta > config.theta_turn:
        return PolicyLabel.TURN_LEFT
    if dtheta < -config.theta_turn:
        return PolicyLabel.TURN_RIGHT

    hist = track[max(0, i - config.heading_frames + 1):i + 1]
    ref = math.atan2(sum(math.sin(p.theta) for p in hist), sum(math.cos(p.theta) for p in hist))
    start, end = seg[0], seg[-1]
    lateral = -(end.x - start.x) * math.sin(ref) + (end.y - start.y) * math.cos(ref)
    if lateral > config.w_lc:
        return PolicyLabel.LANE_CHANGE_LEFT
    if lateral < -config.w_lc:
        return PolicyLabel.LANE_CHANGE_RIGHT

    duration = end.t - start.t
    mean_accel = (end.v - start.v) / duration
    if mean_accel < -config.a_yield or end.v < config.v_stop:
        return PolicyLabel.YIELD
    return PolicyLabel.FORWARD
