import json
import math

import pytest
from hypothesis import given, settings, strategies as st

from trajpred.fixtures import BUILDERS, load_fixture
from trajpred.scenario import (InvariantViolation, ScenarioError, ScenarioParseError,
                               UnknownAgentError, agent_pose_at, dumps_scenario, load_scenario,
                               loads_scenario, wrap_angle)


def minimal_doc(**over):
    doc = {
        "frame_period": 0.1,
        "player_id": 7,
        "lanes": [{"id": "a", "width": 3.5, "speed_limit": 10.0, "left_boundary": "solid",
                   "right_boundary": "broken", "centerline": [0, 0, 50, 0], "successors": []}],
        "obstacles": [],
        "lights": [],
        "agents": [{"id": 7, "kind": "vehicle",
                    "track": [[0.0, 0.0, 0.0, 0.0, 10.0], [1.0, 2.0, 0.0, 0.0, 10.0],
                              [2.0, 4.0, 0.0, 3.0, 10.0], [3.0, 6.0, 0.0, -3.0, 10.0]]}],
    }
    doc.update(over)
    return doc


def test_minimal_document(tmp_path):
    path = tmp_path / "s.json"
    path.write_text(json.dumps(minimal_doc()))
    sc = load_scenario(path)
    assert len(sc.lanes) == 1 and len(sc.agents) == 1
    assert sc.player.id == 7
    assert sc.lanes[0].right_boundary_kind == "broken"
    assert load_scenario(path) == sc


def test_single_point_centerline_is_an_invariant_violation():
    doc = minimal_doc()
    doc["lanes"][0]["centerline"] = [0, 0]
    with pytest.raises(InvariantViolation) as exc:
        loads_scenario(json.dumps(doc))
    assert exc.value.field == "lanes[0].centerline"


def test_parse_error_carries_location():
    with pytest.raises(ScenarioParseError) as exc:
        loads_scenario('{"frame_period": 0.1,\n "lanes": [}')
    assert exc.value.line == 2
    doc = minimal_doc()
    del doc["lanes"][0]["width"]
    with pytest.raises(ScenarioParseError) as exc:
        loads_scenario(json.dumps(doc))
    assert exc.value.field == "lanes[0].width"


@pytest.mark.parametrize("mutate, field", [
    (lambda d: d.update(frame_period=0.0), "frame_period"),
    (lambda d: d.update(player_id=3), "player_id"),
    (lambda d: d["agents"][0]["track"].reverse(), "agents[0].track"),
    (lambda d: d["lanes"][0].update(successors=["nope"]), "lanes[0].successors"),
    (lambda d: d["lights"].append({"stop_line": [0, 0, 1, 0], "approach": [0, 2],
                                   "schedule": [{"t": 0, "state": "red"}]}), "lights[0].approach"),
    (lambda d: d["lights"].append({"stop_line": [0, 0, 1, 0], "approach": [0, 1],
                                   "schedule": [{"t": 1, "state": "red"},
                                                {"t": 0, "state": "green"}]}), "lights[0].schedule"),
])
def test_invariant_violations(mutate, field):
    doc = minimal_doc()
    mutate(doc)
    with pytest.raises(InvariantViolation) as exc:
        loads_scenario(json.dumps(doc))
    assert exc.value.field == field


def test_curved_road_fixture():
    sc = load_fixture("curved_road")
    assert len(sc.lanes) == 1 and len(sc.lights) == 0
    assert sc.player.kind == "vehicle"


def test_pose_at_sample_and_midpoint():
    sc = loads_scenario(json.dumps(minimal_doc()))
    assert agent_pose_at(sc, 7, 1.0) is sc.agent(7).track[1]
    mid = agent_pose_at(sc, 7, 0.5)
    assert mid.x == pytest.approx(1.0)
    # 3.0 -> -3.0 rad blends across the +-pi seam, not through zero
    seam = agent_pose_at(sc, 7, 2.5)
    assert abs(seam.theta) > 3.0


def test_pose_at_errors():
    sc = loads_scenario(json.dumps(minimal_doc()))
    with pytest.raises(UnknownAgentError):
        agent_pose_at(sc, 99, 1.0)
    with pytest.raises(ScenarioError):
        agent_pose_at(sc, 7, 3.5)


@pytest.mark.parametrize("name", sorted(BUILDERS))
def test_round_trip(name):
    sc = load_fixture(name)
    again = loads_scenario(dumps_scenario(sc))
    assert again == sc


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_wrap_angle_range(a):
    w = wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
    assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 19.99))
def test_pose_at_continuous(t):
    sc = load_fixture("curved_road")
    a = agent_pose_at(sc, 0, t)
    b = agent_pose_at(sc, 0, t + 1e-6)
    assert math.hypot(b.x - a.x, b.y - a.y) < 1e-4
    assert abs(wrap_angle(b.theta - a.theta)) < 1e-3


def test_samples_are_fixed_points():
    sc = load_fixture("intersection_construction")
    for agent in sc.agents:
        for p in agent.track[::17]:
            assert agent_pose_at(sc, agent.id, p.t) == p
