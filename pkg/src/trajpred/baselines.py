"""Kinematic extrapolation baselines."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .scenario import PoseSample
from .trajectory import DiscreteTrajectory

DEFAULT_LAMBDA_A = 1.0


def _design(history: Sequence[PoseSample]) -> tuple[np.ndarray, np.ndarray, float]:
    if len(history) < 4:
        raise ValueError("need at least 4 history samples")
    t = np.array([p.t for p in history], dtype=float)
    if np.ptp(t) == 0.0:
        raise ValueError("degenerate history: all samples share one time stamp")
    xy = np.array([[p.x, p.y] for p in history], dtype=float)
    return t - t[-1], xy, float(t[-1])


def naive_fit_baseline(history: Sequence[PoseSample], n: int = 40, h: float = 0.1,
                       lambda_a: float = DEFAULT_LAMBDA_A) -> DiscreteTrajectory:
    """Quadratic least-squares fit of x(t), y(t) with a ridge penalty on the t^2 coefficient.

    Minimizes sum (c0 + c1 t + c2 t^2 - x)^2 + lambda_a * c2^2 per coordinate,
    then evaluates the fit at t_now + i*h.
    """
    tau, xy, t_now = _design(history)
    A = np.stack([np.ones_like(tau), tau, tau ** 2], axis=1)
    M = A.T @ A + np.diag([0.0, 0.0, float(lambda_a)])
    coef = np.linalg.solve(M, A.T @ xy)            # (3, 2)
    tf = h * np.arange(n)
    F = np.stack([np.ones_like(tf), tf, tf ** 2], axis=1)
    return DiscreteTrajectory(F @ coef, t_now, h)


def constant_velocity(history: Sequence[PoseSample], n: int = 40, h: float = 0.1) -> DiscreteTrajectory:
    """Linear least-squares fit of the history, extrapolated (the unbounded-regulator limit)."""
    tau, xy, t_now = _design(history)
    A = np.stack([np.ones_like(tau), tau], axis=1)
    coef, *_ = np.linalg.lstsq(A, xy, rcond=None)
    tf = h * np.arange(n)
    F = np.stack([np.ones_like(tf), tf], axis=1)
    return DiscreteTrajectory(F @ coef, t_now, h)
