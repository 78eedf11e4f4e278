import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from trajpred.trajectory import (DiscreteTrajectory, acceleration, accelerations, curvature,
                                 curvatures, velocities, velocity)


def circle(radius, speed, h, n, direction=1.0):
    w = direction * speed / radius
    t = h * np.arange(n)
    return np.stack([radius * np.cos(w * t), radius * np.sin(w * t)], 1)


def test_velocity_examples():
    traj = DiscreteTrajectory(np.zeros((5, 2)), 0.0, 0.1)
    assert np.array_equal(velocity(traj, 2), [0.0, 0.0])
    line = DiscreteTrajectory(np.stack([np.arange(5.0), np.zeros(5)], 1), 0.0, 0.1)
    assert velocity(line, 0) == pytest.approx([10.0, 0.0])
    assert acceleration(line, 2) == pytest.approx([0.0, 0.0])
    assert curvature(line, 2) == 0.0


def test_velocity_recomputed():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(30, 2))
    v = velocities(pts, 0.1)
    for i in range(29):
        assert np.allclose(v[i], (pts[i + 1] - pts[i]) / 0.1)


def test_acceleration_exact_on_parabola():
    h, a = 0.1, 3.0
    t = h * np.arange(20)
    pts = np.stack([np.zeros_like(t), 0.5 * a * t ** 2], 1)
    assert np.abs(accelerations(pts, h) - [0.0, a]).max() < 1e-9


def test_acceleration_of_sinusoid():
    h = 0.01
    t = h * np.arange(400)
    pts = np.stack([t, np.sin(t)], 1)
    acc = accelerations(pts, h)[:, 1]
    exact = -np.sin(t[1:-1])
    big = np.abs(exact) > 0.1
    assert np.max(np.abs(acc[big] - exact[big]) / np.abs(exact[big])) < 1e-3


def test_circle_curvature_and_orientation():
    pts = circle(20.0, 5.0, 0.1, 60)
    k = curvatures(pts, 0.1)
    assert np.max(np.abs(np.abs(k) - 0.05)) / 0.05 < 0.02
    assert np.all(k > 0)
    k_rev = curvatures(circle(20.0, 5.0, 0.1, 60, -1.0), 0.1)
    assert np.allclose(k_rev, -k)


def test_index_ranges():
    traj = DiscreteTrajectory(circle(20.0, 5.0, 0.1, 10), 0.0, 0.1)
    with pytest.raises(IndexError):
        velocity(traj, 9)
    with pytest.raises(IndexError):
        acceleration(traj, 0)
    with pytest.raises(IndexError):
        curvature(traj, 9)


def test_invariants():
    with pytest.raises(ValueError):
        DiscreteTrajectory(np.zeros((3, 2)), 0.0, 0.1)
    with pytest.raises(ValueError):
        DiscreteTrajectory(np.zeros((5, 3)), 0.0, 0.1)
    with pytest.raises(ValueError):
        DiscreteTrajectory(np.zeros((5, 2)), 0.0, 0.0)
    traj = DiscreteTrajectory(np.zeros((5, 2)), 1.0, 0.1)
    assert np.allclose(traj.times, 1.0 + 0.1 * np.arange(5))
    with pytest.raises(ValueError):
        traj.points[0, 0] = 1.0


def test_csv_rows():
    traj = DiscreteTrajectory(circle(20.0, 5.0, 0.1, 40), 2.0, 0.1)
    lines = traj.to_csv("# hdr").splitlines()
    assert lines[0] == "# hdr" and lines[1] == "t,x,y"
    assert len(lines) == 42


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (12, 2), elements=st.floats(-50, 50)), st.floats(-math.pi, math.pi))
def test_rotation_equivariance(pts, angle):
    c, s = math.cos(angle), math.sin(angle)
    R = np.array([[c, -s], [s, c]])
    rot = pts @ R.T
    h = 0.1
    assert np.allclose(velocities(rot, h), velocities(pts, h) @ R.T, atol=1e-6)
    assert np.allclose(accelerations(rot, h), accelerations(pts, h) @ R.T, atol=1e-3)
    k, kr = np.abs(curvatures(pts, h)), np.abs(curvatures(rot, h))
    assert np.allclose(k, kr, rtol=1e-6, atol=1e-6)
