"""Deterministic scripted world: maneuver track generation and scenario replay.

Maneuver tracks come from a kinematic bicycle rolled out under a scripted
curvature / acceleration program with seeded, bounded, low-pass noise. Fixture
tracks that must follow a road exactly are produced by `path_track`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Iterator

import numpy as np

from .labels import LabelerConfig, PolicyLabel, label_window
from .scenario import AgentScript, PoseSample, Scenario, agent_pose_at, wrap_angle

WHEELBASE = 2.7
BOUND_MARGIN = 0.9   # rollouts keep to this fraction of the curvature / acceleration limits


class ManeuverError(ValueError):
    """Maneuver parameters exceed the configured curvature or acceleration bounds."""


@dataclass(frozen=True)
class ManeuverParams:
    speed: float = 8.0             # m/s at the start of the track
    radius: float = 12.0           # turn radius, m
    turn_angle: float = math.pi / 2
    lane_width: float = 3.5        # lateral displacement of a lane change, m
    lc_duration: float = 4.0       # s
    decel: float = 2.5             # yield deceleration, m/s^2
    lead_frames: int = 35          # straight driving before the maneuver starts
    tail_frames: int = 45          # frames kept after the maneuver ends
    h: float = 0.1
    wheelbase: float = WHEELBASE
    kappa_max: float = 0.2
    a_max: float = 4.0
    steer_noise: float = 0.003     # curvature perturbation bound, 1/m
    accel_noise: float = 0.15      # acceleration perturbation bound, m/s^2
    noise_tau: float = 0.5         # low-pass time constant of the noise, s


def _noise(rng: np.random.Generator, n: int, bound: float, h: float, tau: float) -> np.ndarray:
    """Zero-mean low-pass noise with |value| <= bound."""
    if bound == 0.0:
        return np.zeros(n)
    raw = rng.uniform(-1.0, 1.0, n)
    out = np.empty(n)
    alpha = h / (tau + h)
    acc = 0.0
    for k in range(n):
        acc += alpha * (raw[k] - acc)
        out[k] = acc
    return bound * out


def rollout(x: float, y: float, theta: float, v: float, controller: Callable, n: int,
            h: float, wheelbase: float = WHEELBASE, t0: float = 0.0) -> np.ndarray:
    """Integrate the kinematic bicycle for n steps; rows are [t, x, y, theta, v].

    controller(k, state) returns (curvature command, acceleration). Steering is
    delta = atan(L * curvature); speed is clamped at zero.
    """
    out = np.empty((n, 5))
    for k in range(n):
        out[k] = (t0 + k * h, x, y, theta, v)
        kappa, accel = controller(k, out[k])
        delta = math.atan(wheelbase * kappa)
        v_next = max(0.0, v + accel * h)
        v_mid = 0.5 * (v + v_next)
        theta_mid = theta + 0.5 * v_mid * math.tan(delta) / wheelbase * h
        x += v_mid * math.cos(theta_mid) * h
        y += v_mid * math.sin(theta_mid) * h
        theta += v_mid * math.tan(delta) / wheelbase * h
        v = v_next
    return out


def _check_bounds(kind: PolicyLabel, p: ManeuverParams) -> None:
    k_lim = BOUND_MARGIN * p.kappa_max
    a_lim = BOUND_MARGIN * p.a_max
    slack_k = p.steer_noise
    slack_a = p.accel_noise
    if p.speed <= 0 and kind != PolicyLabel.YIELD:
        raise ManeuverError("speed must be positive")
    if kind in (PolicyLabel.TURN_LEFT, PolicyLabel.TURN_RIGHT):
        kappa = 1.0 / p.radius
        if kappa + slack_k > k_lim:
            raise ManeuverError(f"turn radius {p.radius} m exceeds the curvature bound")
        if p.speed ** 2 * (kappa + slack_k) + slack_a > a_lim:
            raise ManeuverError(f"lateral acceleration of a {p.radius} m turn at {p.speed} m/s too high")
    elif kind in (PolicyLabel.LANE_CHANGE_LEFT, PolicyLabel.LANE_CHANGE_RIGHT):
        amp = 2 * math.pi * p.lane_width / (p.speed ** 2 * p.lc_duration ** 2)
        if amp + slack_k > k_lim or p.speed ** 2 * (amp + slack_k) + slack_a > a_lim:
            raise ManeuverError("lane change too aggressive for the bounds")
    elif kind == PolicyLabel.YIELD:
        if p.decel + slack_a > a_lim:
            raise ManeuverError(f"yield deceleration {p.decel} exceeds the acceleration bound")
    if p.speed ** 2 * slack_k > a_lim:
        raise ManeuverError("steering noise too large at this speed")


def maneuver_frames(kind: PolicyLabel, p: ManeuverParams) -> int:
    """Nominal number of frames the maneuver itself lasts."""
    kind = PolicyLabel(kind)
    if kind in (PolicyLabel.TURN_LEFT, PolicyLabel.TURN_RIGHT):
        return int(math.ceil(p.turn_angle * p.radius / p.speed / p.h)) + 10
    if kind in (PolicyLabel.LANE_CHANGE_LEFT, PolicyLabel.LANE_CHANGE_RIGHT):
        return int(round(p.lc_duration / p.h))
    if kind == PolicyLabel.YIELD:
        return int(math.ceil(p.speed / p.decel / p.h)) + 1
    return 40


def center_frame(kind: PolicyLabel, p: ManeuverParams) -> int:
    """Frame at which the labeler sees the maneuver: a few frames after onset."""
    return p.lead_frames + 4


def generate_maneuver_track(kind: PolicyLabel, params: ManeuverParams = ManeuverParams(),
                            seed: int = 0, agent_id: int = 0) -> AgentScript:
    kind = PolicyLabel(kind)
    p = params
    _check_bounds(kind, p)
    rng = np.random.default_rng([seed, int(kind)])
    n = p.lead_frames + maneuver_frames(kind, p) + p.tail_frames
    k_noise = _noise(rng, n, p.steer_noise, p.h, p.noise_tau)
    a_noise = _noise(rng, n, p.accel_noise, p.h, p.noise_tau)
    theta0 = float(rng.uniform(-math.pi, math.pi))
    x0, y0 = rng.uniform(-50.0, 50.0, 2)
    onset = p.lead_frames
    sign = 1.0 if kind in (PolicyLabel.TURN_LEFT, PolicyLabel.LANE_CHANGE_LEFT) else -1.0
    ramp = 5  # frames to ramp turn curvature in and out

    state = {"phase": 0, "k_ramp_out": None}

    def turn(k, s):
        kappa_t = 1.0 / p.radius
        if k < onset:
            return k_noise[k], a_noise[k]
        turned = sign * wrap_angle(s[3] - theta0)
        if state["phase"] == 0:
            # ramp in, hold, then release so that the ramp-out lands on the target angle
            ramp_out_angle = 0.5 * kappa_t * s[4] * ramp * p.h
            if turned + ramp_out_angle >= p.turn_angle:
                state["phase"] = 1
                state["k_ramp_out"] = k
        if state["phase"] == 0:
            frac = min(1.0, (k - onset + 1) / ramp)
        else:
            frac = max(0.0, 1.0 - (k - state["k_ramp_out"] + 1) / ramp)
        return sign * kappa_t * frac + k_noise[k], a_noise[k]

    def lane_change(k, s):
        t = (k - onset) * p.h
        if 0 <= t < p.lc_duration:
            amp = 2 * math.pi * p.lane_width / (p.speed ** 2 * p.lc_duration ** 2)
            return sign * amp * math.sin(2 * math.pi * t / p.lc_duration) + k_noise[k], a_noise[k]
        return k_noise[k], a_noise[k]

    def yield_(k, s):
        if k < onset:
            return k_noise[k], a_noise[k]
        if s[4] <= 0.0:
            return 0.0, 0.0
        return k_noise[k], -p.decel + a_noise[k]

    def forward(k, s):
        return k_noise[k], a_noise[k]

    controller = {
        PolicyLabel.FORWARD: forward,
        PolicyLabel.YIELD: yield_,
        PolicyLabel.TURN_LEFT: turn,
        PolicyLabel.TURN_RIGHT: turn,
        PolicyLabel.LANE_CHANGE_LEFT: lane_change,
        PolicyLabel.LANE_CHANGE_RIGHT: lane_change,
    }[kind]
    rows = rollout(float(x0), float(y0), theta0, p.speed, controller, n, p.h, p.wheelbase)
    return AgentScript(id=agent_id, kind="vehicle",
                       track=tuple(PoseSample(float(t), float(x), float(y), wrap_angle(th), float(v))
                                   for t, x, y, th, v in rows))


def sample_params(kind: PolicyLabel, rng: np.random.Generator,
                  base: ManeuverParams = ManeuverParams()) -> ManeuverParams:
    """Random, bound-respecting maneuver parameters for the training pack."""
    kind = PolicyLabel(kind)
    if kind in (PolicyLabel.TURN_LEFT, PolicyLabel.TURN_RIGHT):
        radius = float(rng.uniform(8.0, 25.0))
        a_lat = BOUND_MARGIN * base.a_max - base.accel_noise - 0.2
        v_hi = min(10.0, math.sqrt(a_lat / (1.0 / radius + base.steer_noise)))
        # fast enough that the look-ahead sees a clear heading change
        v_lo = max(3.0, 0.18 * radius)
        speed = float(rng.uniform(v_lo, v_hi))
        return replace(base, radius=radius, speed=speed)
    if kind in (PolicyLabel.LANE_CHANGE_LEFT, PolicyLabel.LANE_CHANGE_RIGHT):
        return replace(base, speed=float(rng.uniform(7.0, 15.0)),
                       lc_duration=float(rng.uniform(3.0, 4.0)))
    if kind == PolicyLabel.YIELD:
        return replace(base, speed=float(rng.uniform(4.0, 14.0)), decel=float(rng.uniform(2.0, 3.2)))
    return replace(base, speed=float(rng.uniform(3.0, 15.0)))


def maneuver_pack(tracks_per_kind: int = 60, seed: int = 0) -> list[tuple[PolicyLabel, AgentScript]]:
    """Seeded set of maneuver tracks covering all six labels."""
    rng = np.random.default_rng(seed)
    out = []
    for kind in PolicyLabel:
        for j in range(tracks_per_kind):
            params = sample_params(kind, rng)
            track_seed = int(rng.integers(0, 2 ** 31))
            agent_id = int(kind) * 10000 + j
            out.append((kind, generate_maneuver_track(kind, params, track_seed, agent_id)))
    return out


def label_round_trip(kind: PolicyLabel, params: ManeuverParams, seed: int,
                     t_obs: int = 40, t_pred: int = 40,
                     config: LabelerConfig = LabelerConfig()) -> PolicyLabel:
    """Label of a generated track at its center frame."""
    track = generate_maneuver_track(kind, params, seed)
    return label_window(track.track, center_frame(kind, params), t_obs, t_pred, config)


# ---------------------------------------------------------------------------
# road-following scripted tracks for the fixtures

def path_track(path: np.ndarray, speeds: Callable[[float], float] | float, t0: float,
               t1: float, h: float, s0: float = 0.0) -> list[tuple[float, float, float, float, float]]:
    """Rows [t, x, y, theta, v] of a driver tracking `path` exactly.

    speeds is a constant or a function of time; arc length is integrated with
    the trapezoid rule and heading comes from the path tangent.
    """
    path = np.asarray(path, dtype=float)
    seg = np.diff(path, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    s_cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    speed_fn = speeds if callable(speeds) else (lambda t, c=float(speeds): c)
    n = int(round((t1 - t0) / h)) + 1
    rows = []
    s = s0
    for k in range(n):
        t = t0 + k * h
        v = speed_fn(t)
        if k > 0:
            s += 0.5 * (speed_fn(t - h) + v) * h
        j = int(np.clip(np.searchsorted(s_cum, s, side="right") - 1, 0, len(seg) - 1))
        u = (s - s_cum[j]) / seg_len[j]
        x, y = path[j] + u * seg[j]
        theta = math.atan2(seg[j, 1], seg[j, 0])
        rows.append((round(t, 9), float(x), float(y), theta, float(v)))
    return rows


# ---------------------------------------------------------------------------
# replay

@dataclass(frozen=True)
class Frame:
    t: float
    poses: dict  # agent id -> PoseSample


def replay(scenario: Scenario, from_t: float, to_t: float) -> Iterator[Frame]:
    """Per-frame poses of every agent active at that time, at the frame period."""
    h = scenario.frame_period
    count = int(math.floor((to_t - from_t) / h + 1e-9)) + 1
    for k in range(count):
        t = from_t + k * h
        poses = {}
        for agent in scenario.agents:
            if agent.t_start - 1e-9 <= t <= agent.t_end + 1e-9:
                poses[agent.id] = agent_pose_at(scenario, agent.id, t)
        yield Frame(t, poses)
