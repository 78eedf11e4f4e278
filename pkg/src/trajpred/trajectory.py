"""Discrete trajectory of rear-axle points and its finite-difference calculus.

Velocity is a forward difference, acceleration a central second difference and
curvature combines the two; curvature and acceleration exist on interior
indices only.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

EPS_SPEED = 0.1  # m/s; curvature is reported as 0 below this speed


@dataclass(frozen=True, eq=False)
class DiscreteTrajectory:
    points: np.ndarray  # (N, 2)
    t0: float
    h: float

    def __post_init__(self):
        pts = np.array(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"points must be (N, 2), got {pts.shape}")
        if pts.shape[0] < 4:
            raise ValueError("a trajectory needs at least 4 points")
        if not self.h > 0:
            raise ValueError("h must be positive")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n)

    def with_points(self, points: np.ndarray) -> "DiscreteTrajectory":
        return DiscreteTrajectory(points, self.t0, self.h)

    def __eq__(self, other):
        if not isinstance(other, DiscreteTrajectory):
            return NotImplemented
        return (self.t0 == other.t0 and self.h == other.h
                and np.array_equal(self.points, other.points))

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            buf.write(header.rstrip("\n") + "\n")
        buf.write("t,x,y\n")
        for t, (x, y) in zip(self.times, self.points):
            buf.write(f"{t:.6f},{x:.9f},{y:.9f}\n")
        return buf.getvalue()


def _check(traj: DiscreteTrajectory, i: int, lo: int, hi: int) -> None:
    if not lo <= i < hi:
        raise IndexError(f"index {i} outside [{lo}, {hi})")


def velocity(traj: DiscreteTrajectory, i: int) -> np.ndarray:
    _check(traj, i, 0, traj.n - 1)
    return (traj.points[i + 1] - traj.points[i]) / traj.h


def acceleration(traj: DiscreteTrajectory, i: int) -> np.ndarray:
    _check(traj, i, 1, traj.n - 1)
    p = traj.points
    return (p[i + 1] - 2.0 * p[i] + p[i - 1]) / traj.h ** 2


def curvature(traj: DiscreteTrajectory, i: int) -> float:
    _check(traj, i, 1, traj.n - 1)
    return float(curvatures(traj.points, traj.h)[i - 1])


def velocities(points: np.ndarray, h: float) -> np.ndarray:
    """Forward-difference velocities for indices 0..N-2."""
    return np.diff(points, axis=0) / h


def accelerations(points: np.ndarray, h: float) -> np.ndarray:
    """Central second differences for indices 1..N-2."""
    return (points[2:] - 2.0 * points[1:-1] + points[:-2]) / h ** 2


def curvatures(points: np.ndarray, h: float) -> np.ndarray:
    """Signed curvature for indices 1..N-2 (left turns positive)."""
    v = velocities(points, h)[1:]
    a = accelerations(points, h)
    q = np.einsum("ij,ij->i", v, v)
    cross = v[:, 0] * a[:, 1] - v[:, 1] * a[:, 0]
    out = np.zeros(len(q))
    ok = q >= EPS_SPEED ** 2
    out[ok] = cross[ok] / q[ok] ** 1.5
    return out
