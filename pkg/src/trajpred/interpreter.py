"""From a policy distribution to an optimizer initial guess.

Policies whose reference line cannot be extracted at the current pose are
pruned, the most likely survivor is kept, and the initial trajectory marches
along its reference line under a rate-limited speed profile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .config import CostParams
from .costs import ContextSnapshot, total_cost
from .geometry import GeometryError, ReferenceLine, _segments_intersect, extract_reference_line
from .labels import NUM_LABELS, PolicyLabel
from .scenario import PoseSample, Scenario
from .trajectory import DiscreteTrajectory

A_YIELD = 1.0        # m/s^2, speed decay of the yield profile
TREND_HORIZON = 1.0  # s, the fitted speed trend is extrapolated at most this far
LATERAL_GATE = 2.5   # m, agents closer than this to the reference line block it
STOP_MARGIN = 1.0    # m, the guess comes to rest this far before a red stop line
LATERAL_SHARE = 0.8  # fraction of a_max the guess may spend on lateral acceleration
BRAKE_SHARE = 0.6    # fraction of a_max used when slowing ahead of a curve


class NoFeasiblePolicy(RuntimeError):
    """Every policy failed the feasibility test; carries the distribution."""

    def __init__(self, probs, reasons: dict):
        self.probs = np.asarray(probs)
        self.reasons = reasons
        detail = "; ".join(f"{PolicyLabel(k).slug}: {r}" for k, r in reasons.items())
        super().__init__(f"no feasible policy ({detail})")


@dataclass(frozen=True)
class SpeedTrend:
    """Slope-capped linear fit of observed speeds."""
    v_now: float
    slope: float
    t_now: float

    def __call__(self, t) -> np.ndarray:
        dt = np.clip(np.asarray(t, dtype=float) - self.t_now, 0.0, TREND_HORIZON)
        return np.maximum(0.0, self.v_now + self.slope * dt)


def velocity_trend(history: Sequence[PoseSample], a_max: float) -> SpeedTrend:
    last = history[-1]
    if len(history) < 2:
        return SpeedTrend(last.v, 0.0, last.t)
    t = np.array([p.t for p in history])
    v = np.array([p.v for p in history])
    slope, icpt = np.polyfit(t - t[-1], v, 1)
    slope = float(np.clip(slope, -a_max, a_max))
    return SpeedTrend(max(0.0, float(icpt)), slope, last.t)


def feasible_policies(scenario: Scenario, pose: PoseSample, horizon: float):
    """Reference line per feasible label, plus the reason for each rejection."""
    lines, reasons = {}, {}
    for label in PolicyLabel:
        try:
            lines[label] = extract_reference_line(scenario, pose, label, horizon)
        except GeometryError as exc:
            reasons[int(label)] = str(exc)
    return lines, reasons


def select_policy(probs, feasible: Sequence[PolicyLabel]) -> PolicyLabel | None:
    """Most likely feasible label with nonzero probability; ties go to the lower label."""
    probs = np.asarray(probs, dtype=float)
    best = None
    for label in sorted(feasible):
        p = probs[int(label)]
        if p > 0 and (best is None or p > probs[int(best)]):
            best = label
    return best


def curve_speed_cap(ref: ReferenceLine, a_max: float):
    """Speed limit from path curvature, reachable ahead of each curve.

    Returns a function of arc length. Lateral acceleration stays below
    LATERAL_SHARE * a_max and the approach brakes at BRAKE_SHARE * a_max.
    """
    ss = ref.s
    vh = ref._vertex_heading
    kappa = np.abs(np.diff(vh)) / np.maximum(np.diff(ss), 1e-9)   # per segment
    v_seg = np.sqrt(LATERAL_SHARE * a_max / np.maximum(kappa, 1e-9))
    start = ss[:-1]
    b = BRAKE_SHARE * a_max

    def cap(s: float) -> float:
        ahead = start + np.diff(ss) > s
        if not np.any(ahead):
            return float(v_seg[-1])
        dist = np.maximum(0.0, start[ahead] - s)
        return float(np.min(np.sqrt(v_seg[ahead] ** 2 + 2.0 * b * dist)))

    return cap


def speed_profile(ref: ReferenceLine, policy: PolicyLabel, v0: float, trend: SpeedTrend | None,
                  n: int, h: float, a_max: float, t0: float) -> tuple[np.ndarray, np.ndarray]:
    """Arc-length positions (n,) and per-step speeds (n-1,) of the initial march.

    Speed starts at v0 and moves toward min(speed limit, trend, curve cap) by at
    most a_max*h per step; the yield profile decays toward zero at A_YIELD instead.
    """
    curve = curve_speed_cap(ref, a_max)
    s = np.zeros(n)
    speeds = np.zeros(n - 1)
    v = v0
    for i in range(n - 1):
        if i > 0:
            if policy == PolicyLabel.YIELD:
                target, rate = 0.0, A_YIELD
            else:
                v_lim = float(ref.speed_limit_at(s[i])[0])
                v_tr = float(trend(t0 + i * h)) if trend is not None else v0
                target, rate = min(v_lim, v_tr, curve(s[i])), a_max
            v = max(0.0, v + float(np.clip(target - v, -rate * h, rate * h)))
        speeds[i] = v
        s[i + 1] = s[i] + v * h
    return s, speeds


def interacting(ref: ReferenceLine, s0: float, mo_predictions) -> list[np.ndarray]:
    """Agents whose predicted positions come within LATERAL_GATE of the line ahead."""
    out = []
    for other in mo_predictions or ():
        other = np.asarray(other)
        s_mo, _ = ref.project(other)
        lat = np.linalg.norm(ref.point_at(s_mo) - other, axis=1)
        if np.any((lat < LATERAL_GATE) & (s_mo > s0)):
            out.append(other)
    return out


def _brake_to(s: np.ndarray, stop: float, h: float) -> np.ndarray:
    """Constant-deceleration arc positions from s[0] at the initial speed to rest at `stop`."""
    v0 = (s[1] - s[0]) / h
    dist = stop - s[0]
    if dist <= 1e-9 or v0 <= 0.0:
        return np.full(len(s), s[0])
    decel = v0 * v0 / (2.0 * dist)
    t = np.minimum(h * np.arange(len(s)), v0 / decel)
    return s[0] + v0 * t - 0.5 * decel * t * t


def stop_line_arcs(ref: ReferenceLine, red_lights) -> list[float]:
    """Arc lengths at which the reference line crosses the given stop lines along their approach."""
    out = []
    pts = ref.points
    for light in red_lights or ():
        a = np.array(light.stop_line[:2])
        b = np.array(light.stop_line[2:])
        appr = np.array(light.approach)
        for k in range(len(pts) - 1):
            p, q = pts[k], pts[k + 1]
            if (q - p) @ appr <= 0:
                continue
            u = _segments_intersect(p, q, a, b)
            if u is not None:
                out.append(float(ref.s[k] + u * (ref.s[k + 1] - ref.s[k])))
                break
    return out


def cap_before_red_lights(ref: ReferenceLine, s: np.ndarray, red_lights, a_max: float,
                          h: float) -> np.ndarray:
    """Brake the guess before a red stop line when that is possible within a_max."""
    v0 = (s[1] - s[0]) / h
    for s_line in sorted(stop_line_arcs(ref, red_lights)):
        stop = s_line - STOP_MARGIN
        if s_line <= s[0] or s[-1] < stop:
            continue
        dist = stop - s[0]
        if dist > 0 and v0 * v0 / (2.0 * dist) <= a_max:
            return np.minimum(s, _brake_to(s, stop, h))
    return s


def cap_behind_agents(ref: ReferenceLine, s: np.ndarray, mo_predictions, gap: float,
                      h: float) -> np.ndarray:
    """Keep the march `gap` behind agents predicted on the line ahead.

    When an agent blocks the march, the guess brakes at a constant rate so that
    it comes to rest at the tightest gap point.
    """
    cap = np.full(len(s), np.inf)
    for other in mo_predictions or ():
        other = np.asarray(other)[:len(s)]
        s_mo, _ = ref.project(other)
        lat = np.linalg.norm(ref.point_at(s_mo) - other, axis=1)
        blocking = (lat < LATERAL_GATE) & (s_mo > s[0])
        cap = np.minimum(cap, np.where(blocking, s_mo - gap, np.inf))
    if np.all(s <= cap):
        return s
    brake = _brake_to(s, max(float(np.min(cap)), s[0]), h)
    out = np.minimum(np.minimum(s, cap), brake)
    out[0] = s[0]
    return np.maximum.accumulate(np.maximum(out, s[0]))


@dataclass(frozen=True, eq=False)
class Interpretation:
    policy: PolicyLabel
    init: DiscreteTrajectory
    reference: ReferenceLine
    desired_speed: np.ndarray   # per velocity index
    interacting: tuple = ()     # predicted positions of the agents that matter here


def interpret(probs, scenario: Scenario, pose: PoseSample, n: int = 40, h: float = 0.1,
              history: Sequence[PoseSample] | None = None,
              params: CostParams = CostParams(), mo_predictions=None, red_lights=()):
    """Choose the policy and build the initial guess along its reference line."""
    probs = np.asarray(probs, dtype=float)
    if probs.shape != (NUM_LABELS,):
        raise ValueError(f"expected {NUM_LABELS} probabilities, got shape {probs.shape}")
    trend = velocity_trend(history, params.a_max) if history else None
    v_peak = max(pose.v, float(trend(pose.t + TREND_HORIZON)) if trend else 0.0)
    horizon = v_peak * n * h + 30.0
    lines, reasons = feasible_policies(scenario, pose, horizon)
    policy = select_policy(probs, list(lines))
    if policy is None:
        for label in lines:
            reasons[int(label)] = "zero probability"
        raise NoFeasiblePolicy(probs, reasons)
    ref = lines[policy]
    s, speeds = speed_profile(ref, policy, pose.v, trend, n, h, params.a_max, pose.t)
    s = cap_before_red_lights(ref, s, red_lights, params.a_max, h)
    near = interacting(ref, 0.0, mo_predictions)
    if near:
        s = cap_behind_agents(ref, s, near, params.tau_o, h)
    init = DiscreteTrajectory(ref.point_at(s), pose.t, h)
    return Interpretation(policy, init, ref, speeds, tuple(near))


def initial_guess_cost_sanity(init: DiscreteTrajectory, ctx: ContextSnapshot,
                              params: CostParams) -> float:
    """Objective value of the initial guess (kept for diagnostics)."""
    return total_cost(ctx, params, init)[0]
