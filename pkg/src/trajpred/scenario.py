"""Driving-context data model and the JSON scenario file format.

A scenario file is a single UTF-8 JSON document::

    {
      "frame_period": 0.1,
      "player_id": 0,
      "lanes": [{"id": "a", "width": 3.5, "speed_limit": 12.0,
                 "left_boundary": "solid", "right_boundary": "broken",
                 "centerline": [x0, y0, x1, y1, ...], "successors": ["b"]}],
      "obstacles": [{"polygon": [x0, y0, x1, y1, x2, y2, ...]}],
      "lights": [{"stop_line": [x0, y0, x1, y1], "approach": [dx, dy],
                  "schedule": [{"t": 0.0, "state": "red"}]}],
      "agents": [{"id": 0, "kind": "vehicle", "track": [[t, x, y, theta, v], ...]}]
    }

All values are SI units. Loaded values are immutable.
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import shapely

BOUNDARY_KINDS = ("solid", "broken")
LIGHT_STATES = ("red", "green")
AGENT_KINDS = ("vehicle", "pedestrian")


class ScenarioError(ValueError):
    """Base class for scenario loading and query errors."""


class ScenarioParseError(ScenarioError):
    """Malformed document; carries a line/column or a field path."""

    def __init__(self, message: str, *, line: int | None = None, column: int | None = None,
                 field: str | None = None):
        self.line = line
        self.column = column
        self.field = field
        where = []
        if line is not None:
            where.append(f"line {line}, column {column}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{message} ({'; '.join(where)})" if where else message)


class InvariantViolation(ScenarioError):
    """A well-formed document whose values break a type invariant."""

    def __init__(self, field: str, invariant: str):
        self.field = field
        self.invariant = invariant
        super().__init__(f"invariant violated at '{field}': {invariant}")


class UnknownAgentError(ScenarioError, KeyError):
    pass


def wrap_angle(a: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2.0 * math.pi)
    if a <= 0.0:
        a += 2.0 * math.pi
    return a - math.pi


@dataclass(frozen=True)
class PoseSample:
    t: float
    x: float
    y: float
    theta: float
    v: float

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class Lane:
    id: Any
    centerline: tuple[tuple[float, float], ...]
    width: float
    speed_limit: float
    left_boundary_kind: str = "solid"
    right_boundary_kind: str = "solid"
    successors: tuple[Any, ...] = ()

    @cached_property
    def points(self) -> np.ndarray:
        pts = np.array(self.centerline, dtype=float)
        pts.setflags(write=False)
        return pts

    @cached_property
    def length(self) -> float:
        return float(np.sum(np.linalg.norm(np.diff(self.points, axis=0), axis=1)))


@dataclass(frozen=True)
class StaticObstacle:
    polygon: tuple[tuple[float, float], ...]

    @cached_property
    def points(self) -> np.ndarray:
        pts = np.array(self.polygon, dtype=float)
        pts.setflags(write=False)
        return pts


@dataclass(frozen=True)
class TrafficLight:
    stop_line: tuple[float, float, float, float]
    approach: tuple[float, float]
    schedule: tuple[tuple[float, str], ...]

    def state_at(self, t: float) -> str:
        starts = [s for s, _ in self.schedule]
        k = bisect.bisect_right(starts, t) - 1
        return self.schedule[max(k, 0)][1]

    def is_red(self, t: float) -> bool:
        return self.state_at(t) == "red"


@dataclass(frozen=True)
class AgentScript:
    id: int
    kind: str
    track: tuple[PoseSample, ...]

    @cached_property
    def array(self) -> np.ndarray:
        """Track as an (n, 5) array of [t, x, y, theta, v]."""
        arr = np.array([[p.t, p.x, p.y, p.theta, p.v] for p in self.track], dtype=float)
        arr.setflags(write=False)
        return arr

    @property
    def t_start(self) -> float:
        return self.track[0].t

    @property
    def t_end(self) -> float:
        return self.track[-1].t


@dataclass(frozen=True)
class Scenario:
    lanes: tuple[Lane, ...]
    obstacles: tuple[StaticObstacle, ...]
    lights: tuple[TrafficLight, ...]
    agents: tuple[AgentScript, ...]
    player_id: int
    frame_period: float
    name: str = field(default="", compare=False)

    @cached_property
    def _agent_index(self) -> dict[int, AgentScript]:
        return {a.id: a for a in self.agents}

    @cached_property
    def _lane_index(self) -> dict[Any, Lane]:
        return {ln.id: ln for ln in self.lanes}

    def agent(self, agent_id: int) -> AgentScript:
        try:
            return self._agent_index[agent_id]
        except KeyError:
            raise UnknownAgentError(f"no agent with id {agent_id!r}") from None

    def lane(self, lane_id) -> Lane:
        return self._lane_index[lane_id]

    @property
    def player(self) -> AgentScript:
        return self.agent(self.player_id)

    @property
    def horizon(self) -> tuple[float, float]:
        return (min(a.t_start for a in self.agents), max(a.t_end for a in self.agents))


# ---------------------------------------------------------------------------
# queries

def agent_pose_at(scenario: Scenario, agent_id: int, t: float) -> PoseSample:
    """Interpolated pose of an agent; stored samples are returned unchanged."""
    agent = scenario.agent(agent_id)
    arr = agent.array
    ts = arr[:, 0]
    eps = 1e-9
    if t < ts[0] - eps or t > ts[-1] + eps:
        raise ScenarioError(
            f"t={t} outside track span [{ts[0]}, {ts[-1]}] of agent {agent_id}")
    k = int(np.searchsorted(ts, t))
    if k < len(ts) and abs(ts[k] - t) <= eps:
        return agent.track[k]
    if k > 0 and abs(ts[k - 1] - t) <= eps:
        return agent.track[k - 1]
    k = min(max(k, 1), len(ts) - 1)
    a, b = arr[k - 1], arr[k]
    w = (t - a[0]) / (b[0] - a[0])
    dtheta = wrap_angle(b[3] - a[3])
    return PoseSample(
        t=float(t),
        x=float(a[1] + w * (b[1] - a[1])),
        y=float(a[2] + w * (b[2] - a[2])),
        theta=wrap_angle(a[3] + w * dtheta),
        v=float(a[4] + w * (b[4] - a[4])),
    )


def agent_history(scenario: Scenario, agent_id: int, t_now: float, frames: int) -> list[PoseSample]:
    """The `frames` poses ending at t_now, spaced by the frame period."""
    h = scenario.frame_period
    return [agent_pose_at(scenario, agent_id, t_now - (frames - 1 - k) * h) for k in range(frames)]


# ---------------------------------------------------------------------------
# parsing

def _get(obj: dict, key: str, path: str):
    if not isinstance(obj, dict):
        raise ScenarioParseError("expected an object", field=path)
    if key not in obj:
        raise ScenarioParseError("missing key", field=f"{path}.{key}" if path else key)
    return obj[key]


def _num(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ScenarioParseError(f"expected a number, got {value!r}", field=path)
    x = float(value)
    if not math.isfinite(x):
        raise InvariantViolation(path, "value must be finite")
    return x


def _num_list(value, path: str) -> list[float]:
    if not isinstance(value, list):
        raise ScenarioParseError("expected an array", field=path)
    return [_num(v, f"{path}[{i}]") for i, v in enumerate(value)]


def _pairs(flat: list[float], path: str) -> tuple[tuple[float, float], ...]:
    if len(flat) % 2:
        raise ScenarioParseError("flat coordinate array must have even length", field=path)
    return tuple((flat[i], flat[i + 1]) for i in range(0, len(flat), 2))


def _choice(value, options: tuple[str, ...], path: str) -> str:
    if value not in options:
        raise ScenarioParseError(f"expected one of {options}, got {value!r}", field=path)
    return value


def _parse_lane(obj: dict, path: str) -> Lane:
    lane_id = _get(obj, "id", path)
    width = _num(_get(obj, "width", path), f"{path}.width")
    speed_limit = _num(_get(obj, "speed_limit", path), f"{path}.speed_limit")
    left = _choice(obj.get("left_boundary", "solid"), BOUNDARY_KINDS, f"{path}.left_boundary")
    right = _choice(obj.get("right_boundary", "solid"), BOUNDARY_KINDS, f"{path}.right_boundary")
    pts = _pairs(_num_list(_get(obj, "centerline", path), f"{path}.centerline"),
                 f"{path}.centerline")
    succ = obj.get("successors", [])
    if not isinstance(succ, list):
        raise ScenarioParseError("expected an array", field=f"{path}.successors")
    if width <= 0:
        raise InvariantViolation(f"{path}.width", "width > 0")
    if speed_limit <= 0:
        raise InvariantViolation(f"{path}.speed_limit", "speed_limit > 0")
    if len(pts) < 2:
        raise InvariantViolation(f"{path}.centerline", "centerline has >= 2 points")
    for i in range(1, len(pts)):
        if pts[i] == pts[i - 1]:
            raise InvariantViolation(f"{path}.centerline", "consecutive centerline points are distinct")
    return Lane(id=lane_id, centerline=pts, width=width, speed_limit=speed_limit,
                left_boundary_kind=left, right_boundary_kind=right, successors=tuple(succ))


def _parse_obstacle(obj: dict, path: str) -> StaticObstacle:
    pts = _pairs(_num_list(_get(obj, "polygon", path), f"{path}.polygon"), f"{path}.polygon")
    if len(pts) < 3:
        raise InvariantViolation(f"{path}.polygon", "polygon has >= 3 vertices")
    ring = shapely.LinearRing(pts)
    if not ring.is_simple or shapely.Polygon(pts).area <= 0.0:
        raise InvariantViolation(f"{path}.polygon", "polygon is simple (non-self-intersecting)")
    return StaticObstacle(polygon=pts)


def _parse_light(obj: dict, path: str) -> TrafficLight:
    line = _num_list(_get(obj, "stop_line", path), f"{path}.stop_line")
    if len(line) != 4:
        raise ScenarioParseError("stop_line must be [x0, y0, x1, y1]", field=f"{path}.stop_line")
    if line[0] == line[2] and line[1] == line[3]:
        raise InvariantViolation(f"{path}.stop_line", "stop line has distinct endpoints")
    approach = _num_list(_get(obj, "approach", path), f"{path}.approach")
    if len(approach) != 2:
        raise ScenarioParseError("approach must be [dx, dy]", field=f"{path}.approach")
    norm = math.hypot(*approach)
    if abs(norm - 1.0) > 1e-3:
        raise InvariantViolation(f"{path}.approach", "approach_direction has unit norm")
    approach = [approach[0] / norm, approach[1] / norm]
    raw = _get(obj, "schedule", path)
    if not isinstance(raw, list) or not raw:
        raise ScenarioParseError("schedule must be a non-empty array", field=f"{path}.schedule")
    schedule = []
    for k, entry in enumerate(raw):
        p = f"{path}.schedule[{k}]"
        schedule.append((_num(_get(entry, "t", p), f"{p}.t"),
                         _choice(_get(entry, "state", p), LIGHT_STATES, f"{p}.state")))
    for k in range(1, len(schedule)):
        if schedule[k][0] <= schedule[k - 1][0]:
            raise InvariantViolation(f"{path}.schedule",
                                     "schedule intervals non-overlapping and time-ordered")
    return TrafficLight(stop_line=tuple(line), approach=tuple(approach), schedule=tuple(schedule))


def _parse_agent(obj: dict, path: str) -> AgentScript:
    agent_id = _get(obj, "id", path)
    if isinstance(agent_id, bool) or not isinstance(agent_id, int):
        raise ScenarioParseError("agent id must be an integer", field=f"{path}.id")
    kind = _choice(_get(obj, "kind", path), AGENT_KINDS, f"{path}.kind")
    raw = _get(obj, "track", path)
    if not isinstance(raw, list):
        raise ScenarioParseError("expected an array", field=f"{path}.track")
    track = []
    for k, row in enumerate(raw):
        vals = _num_list(row, f"{path}.track[{k}]")
        if len(vals) != 5:
            raise ScenarioParseError("track rows are [t, x, y, theta, v]", field=f"{path}.track[{k}]")
        t, x, y, th, v = vals
        track.append(PoseSample(t, x, y, wrap_angle(th), v))
    if len(track) < 2:
        raise InvariantViolation(f"{path}.track", "track has >= 2 samples")
    for k in range(1, len(track)):
        if track[k].t <= track[k - 1].t:
            raise InvariantViolation(f"{path}.track", "t strictly increases within the track")
    return AgentScript(id=agent_id, kind=kind, track=tuple(track))


def _as_list(doc: dict, key: str) -> list:
    value = doc.get(key, [])
    if not isinstance(value, list):
        raise ScenarioParseError("expected an array", field=key)
    return value


def parse_scenario(doc: dict, name: str = "") -> Scenario:
    """Build a validated Scenario from an already-decoded JSON document."""
    if not isinstance(doc, dict):
        raise ScenarioParseError("top level must be an object")
    frame_period = _num(_get(doc, "frame_period", ""), "frame_period")
    player_id = _get(doc, "player_id", "")
    lanes = tuple(_parse_lane(o, f"lanes[{i}]") for i, o in enumerate(_as_list(doc, "lanes")))
    obstacles = tuple(_parse_obstacle(o, f"obstacles[{i}]")
                      for i, o in enumerate(_as_list(doc, "obstacles")))
    lights = tuple(_parse_light(o, f"lights[{i}]") for i, o in enumerate(_as_list(doc, "lights")))
    agents = tuple(_parse_agent(o, f"agents[{i}]") for i, o in enumerate(_as_list(doc, "agents")))

    if frame_period <= 0:
        raise InvariantViolation("frame_period", "frame_period > 0")
    lane_ids = [ln.id for ln in lanes]
    if len(set(lane_ids)) != len(lane_ids):
        raise InvariantViolation("lanes", "lane ids are unique")
    for i, ln in enumerate(lanes):
        for s in ln.successors:
            if s not in lane_ids:
                raise InvariantViolation(f"lanes[{i}].successors",
                                         "successor references resolve within the scenario")
    agent_ids = [a.id for a in agents]
    if len(set(agent_ids)) != len(agent_ids):
        raise InvariantViolation("agents", "id unique per scenario")
    if agent_ids.count(player_id) != 1:
        raise InvariantViolation("player_id", "player_id refers to exactly one agent")
    return Scenario(lanes=lanes, obstacles=obstacles, lights=lights, agents=agents,
                    player_id=player_id, frame_period=frame_period, name=name)


def loads_scenario(text: str, name: str = "") -> Scenario:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioParseError(exc.msg, line=exc.lineno, column=exc.colno) from None
    return parse_scenario(doc, name=name)


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return loads_scenario(path.read_text(encoding="utf-8"), name=path.stem)


# ---------------------------------------------------------------------------
# serialization

def _flat(points: Iterable[Iterable[float]]) -> list[float]:
    return [float(c) for p in points for c in p]


def agent_to_dict(agent: AgentScript) -> dict:
    return {
        "id": agent.id,
        "kind": agent.kind,
        "track": [[p.t, p.x, p.y, p.theta, p.v] for p in agent.track],
    }


def scenario_to_dict(scenario: Scenario) -> dict:
    return {
        "frame_period": scenario.frame_period,
        "player_id": scenario.player_id,
        "lanes": [
            {
                "id": ln.id,
                "width": ln.width,
                "speed_limit": ln.speed_limit,
                "left_boundary": ln.left_boundary_kind,
                "right_boundary": ln.right_boundary_kind,
                "centerline": _flat(ln.centerline),
                "successors": list(ln.successors),
            }
            for ln in scenario.lanes
        ],
        "obstacles": [{"polygon": _flat(o.polygon)} for o in scenario.obstacles],
        "lights": [
            {
                "stop_line": list(lt.stop_line),
                "approach": list(lt.approach),
                "schedule": [{"t": t, "state": s} for t, s in lt.schedule],
            }
            for lt in scenario.lights
        ],
        "agents": [agent_to_dict(a) for a in scenario.agents],
    }


def dumps_scenario(scenario: Scenario) -> str:
    return json.dumps(scenario_to_dict(scenario), indent=1)


def save_scenario(scenario: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(scenario) + "\n", encoding="utf-8")
