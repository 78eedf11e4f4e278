"""Programmatic builders for the bundled scenario fixtures.

`write_fixtures(dir)` regenerates the JSON files shipped in data/scenarios.
Every player track is scripted to follow its lane centerline exactly, so the
ground truth is known.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import numpy as np

from .scenario import Scenario, dumps_scenario, load_scenario, parse_scenario
from .simulator import path_track

H = 0.1
LANE_W = 3.5


def _flat(points) -> list[float]:
    return [round(float(c), 6) for p in points for c in p]


def _arc(center, radius, a0, a1, step_deg=3.0) -> np.ndarray:
    n = max(2, int(math.ceil(abs(math.degrees(a1 - a0)) / step_deg)) + 1)
    a = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(a), center[1] + radius * np.sin(a)], axis=1)


def _lane(lane_id, pts, width=LANE_W, speed=13.9, left="solid", right="solid", successors=()):
    return {"id": lane_id, "width": width, "speed_limit": speed, "left_boundary": left,
            "right_boundary": right, "centerline": _flat(pts), "successors": list(successors)}


def _agent(agent_id, rows, kind="vehicle"):
    return {"id": agent_id, "kind": kind,
            "track": [[round(r[0], 6), round(r[1], 6), round(r[2], 6), round(r[3], 9), round(r[4], 6)]
                      for r in rows]}


def _two_way_road(y0: float, y1: float, speed: float) -> list[dict]:
    """Northbound lane at x=+1.75 and southbound at x=-1.75 sharing a broken divider."""
    half = LANE_W / 2
    return [
        _lane("nb", [(half, y0), (half, y1)], speed=speed, left="broken"),
        _lane("sb", [(-half, y1), (-half, y0)], speed=speed, left="broken"),
    ]


def _speed_fn(knots):
    """Piecewise-linear speed over time from (t, v) knots."""
    ts = [k[0] for k in knots]
    vs = [k[1] for k in knots]
    return lambda t: float(np.interp(t, ts, vs))


# ---------------------------------------------------------------------------

def straight_lane() -> dict:
    path = [(0.0, 0.0), (300.0, 0.0)]
    return {
        "frame_period": H, "player_id": 0,
        "lanes": [_lane("main", path, width=4.0, speed=15.0)],
        "obstacles": [], "lights": [],
        "agents": [_agent(0, path_track(np.array(path), 10.0, 0.0, 20.0, H))],
    }


def curved_road() -> dict:
    straight1 = np.array([(0.0, 0.0), (60.0, 0.0)])
    arc = _arc((60.0, 40.0), 40.0, -math.pi / 2, 0.0)
    straight2 = np.array([(100.0, 40.0), (100.0, 160.0)])
    center = np.vstack([straight1, arc[1:], straight2[1:]])
    return {
        "frame_period": H, "player_id": 0,
        "lanes": [_lane("road", center, speed=12.0)],
        "obstacles": [], "lights": [],
        "agents": [_agent(0, path_track(center, 10.0, 0.0, 20.0, H))],
    }


def _intersection_lanes(speed=11.0) -> list[dict]:
    half = LANE_W / 2
    box = 10.0
    left_arc = _arc((-box, -box), box + half, 0.0, math.pi / 2)     # (1.75,-10) -> (-10,1.75)
    right_arc = _arc((box, -box), box - half, math.pi, math.pi / 2)  # (1.75,-10) -> (10,-1.75)
    return [
        _lane("south_in", [(half, -150.0), (half, -box)], speed=speed, left="broken",
              successors=("fwd", "left", "right")),
        _lane("fwd", [(half, -box), (half, box)], speed=speed, left="broken", right="broken",
              successors=("north_out",)),
        _lane("left", left_arc, speed=speed, left="broken", right="broken", successors=("west_out",)),
        _lane("right", right_arc, speed=speed, left="broken", right="broken", successors=("east_out",)),
        _lane("north_out", [(half, box), (half, 150.0)], speed=speed, left="broken"),
        _lane("west_out", [(-box, half), (-150.0, half)], speed=speed, left="broken"),
        _lane("east_out", [(box, -half), (150.0, -half)], speed=speed, left="broken"),
        # opposite directions
        _lane("north_in", [(-half, 150.0), (-half, box)], speed=speed, left="broken",
              successors=("sb_through",)),
        _lane("sb_through", [(-half, box), (-half, -box)], speed=speed, left="broken", right="broken",
              successors=("south_out",)),
        _lane("south_out", [(-half, -box), (-half, -150.0)], speed=speed, left="broken"),
        _lane("east_in", [(150.0, half), (box, half)], speed=speed, left="broken",
              successors=("wb_through",)),
        _lane("wb_through", [(box, half), (-box, half)], speed=speed, left="broken", right="broken"),
        _lane("west_in", [(-150.0, -half), (-box, -half)], speed=speed, left="broken",
              successors=("eb_through",)),
        _lane("eb_through", [(-box, -half), (box, -half)], speed=speed, left="broken", right="broken"),
    ]


def intersection_construction() -> dict:
    lanes = _intersection_lanes()
    by_id = {ln["id"]: np.array(ln["centerline"]).reshape(-1, 2) for ln in lanes}
    player_path = np.vstack([by_id["south_in"], by_id["left"][1:], by_id["west_out"][1:]])
    # approach at 9 m/s, slow to 6 m/s for the turn, then speed back up
    speed = _speed_fn([(0.0, 9.0), (9.0, 9.0), (11.5, 6.0), (15.0, 6.0), (17.0, 9.0), (30.0, 9.0)])
    player = path_track(player_path, speed, 0.0, 24.0, H, s0=40.0)
    opposing_path = np.vstack([by_id["north_in"], by_id["sb_through"][1:], by_id["south_out"][1:]])
    opposing = path_track(opposing_path, 8.0, 0.0, 24.0, H, s0=30.0)
    construction = [(2.0, 28.0), (3.6, 28.0), (3.6, 36.0), (2.0, 36.0)]
    return {
        "frame_period": H, "player_id": 0, "lanes": lanes,
        "obstacles": [{"polygon": _flat(construction)}],
        "lights": [],
        "agents": [_agent(0, player), _agent(1, opposing)],
    }


def red_light_construction() -> dict:
    """Slow approach to a red light with a construction zone past the stop line."""
    lanes = _two_way_road(-150.0, 150.0, 13.9)
    path = np.array([(LANE_W / 2, -150.0), (LANE_W / 2, 150.0)])
    # 3 m/s cruise, at y=-10 at t=10, then a gentle stop one meter before the line
    speed = _speed_fn([(0.0, 3.0), (10.0, 3.0), (16.0, 0.0), (30.0, 0.0)])
    player = path_track(path, speed, 0.0, 20.0, H, s0=110.0)
    construction = [(0.4, 14.0), (3.4, 14.0), (3.4, 22.0), (0.4, 22.0)]
    return {
        "frame_period": H, "player_id": 0, "lanes": lanes,
        "obstacles": [{"polygon": _flat(construction)}],
        "lights": [{"stop_line": [0.0, 0.0, LANE_W, 0.0], "approach": [0.0, 1.0],
                    "schedule": [{"t": 0.0, "state": "red"}]}],
        "agents": [_agent(0, player)],
    }


def red_light_offence() -> dict:
    """15 m/s approach; the light turns red when the car is 15.5 m from the line."""
    lanes = _two_way_road(-200.0, 150.0, 16.7)
    path = np.array([(LANE_W / 2, -200.0), (LANE_W / 2, 150.0)])
    player = path_track(path, 15.0, 0.0, 12.0, H, s0=102.0)   # y = -8 at t = 6
    return {
        "frame_period": H, "player_id": 0, "lanes": lanes, "obstacles": [],
        "lights": [{"stop_line": [0.0, 0.0, LANE_W, 0.0], "approach": [0.0, 1.0],
                    "schedule": [{"t": 0.0, "state": "green"}, {"t": 5.5, "state": "red"}]}],
        "agents": [_agent(0, player)],
    }


PED_FRAME_T = 8.0   # s, the braking frame
PED_AHEAD = 20.0    # m between car and pedestrian at that frame


def pedestrian_braking() -> dict:
    """A pedestrian steps into the lane 20 m ahead of a car cruising at 15 m/s."""
    lanes = _two_way_road(-150.0, 250.0, 16.7)
    x_lane = LANE_W / 2
    path = np.array([(x_lane, -150.0), (x_lane, 250.0)])
    t_b, decel = PED_FRAME_T, 6.0
    t_stop = t_b + 15.0 / decel
    speed = _speed_fn([(0.0, 15.0), (t_b, 15.0), (t_stop, 0.0), (t_stop + 3.0, 0.0),
                       (t_stop + 8.0, 10.0), (40.0, 10.0)])
    player = path_track(path, speed, 0.0, 18.0, H, s0=30.0)
    y_car = -150.0 + 30.0 + 15.0 * t_b
    y_ped = y_car + PED_AHEAD
    # walks west at 0.6 m/s, 0.75 m right of the lane center at the braking frame
    v_ped = 0.6
    x_at_tb = x_lane + 0.75
    rows = []
    for k in range(int(round(18.0 / H)) + 1):
        t = k * H
        rows.append((round(t, 9), x_at_tb - v_ped * (t - t_b), y_ped, math.pi, v_ped))
    return {
        "frame_period": H, "player_id": 0, "lanes": lanes, "obstacles": [], "lights": [],
        "agents": [_agent(0, player), _agent(7, rows, kind="pedestrian")],
    }


BUILDERS = {
    "straight_lane": straight_lane,
    "curved_road": curved_road,
    "intersection_construction": intersection_construction,
    "red_light_construction": red_light_construction,
    "red_light_offence": red_light_offence,
    "pedestrian_braking": pedestrian_braking,
}


def build(name: str) -> Scenario:
    return parse_scenario(BUILDERS[name](), name=name)


def write_fixtures(directory: str | Path) -> list[Path]:
    out = []
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in BUILDERS:
        path = directory / f"{name}.json"
        path.write_text(dumps_scenario(build(name)), encoding="utf-8")
        out.append(path)
    return out


def load_fixture(name: str) -> Scenario:
    """Load a bundled fixture by name."""
    if name not in BUILDERS:
        raise KeyError(f"unknown fixture {name!r}; known: {', '.join(BUILDERS)}")
    ref = resources.files("trajpred").joinpath(f"data/scenarios/{name}.json")
    with resources.as_file(ref) as p:
        return load_scenario(p)
