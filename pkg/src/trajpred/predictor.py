"""Trajectory optimizer and the per-round prediction pipeline."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .baselines import naive_fit_baseline
from .config import CostParams, file_header
from .costs import ContextSnapshot, total_cost, weighted_residuals
from .geometry import (DEFAULT_CELL, GeometryError, OutsideFieldError, Region,
                       build_lane_sdf, build_obstacle_sdf, context_region,
                       red_light_crossings)
from .interpreter import NoFeasiblePolicy, initial_guess_cost_sanity, interpret
from .labels import PolicyLabel
from .policy_net import RecurrentClassifier, infer, window_features
from .scenario import PoseSample, Scenario, ScenarioError, agent_history, agent_pose_at
from .trajectory import DiscreteTrajectory

log = logging.getLogger(__name__)

N_DEFAULT = 40
H_DEFAULT = 0.1
REGION_MARGIN = 10.0     # m of field kept around the initial guess
ANCHOR_BLEND = 20        # steps over which an off-centerline start merges into the guess
INTERACTION_RANGE = 60.0  # m, agents farther than this are ignored


class InsufficientHistory(ScenarioError):
    pass


# ---------------------------------------------------------------------------
# Levenberg-Marquardt

@dataclass(frozen=True)
class SolverOptions:
    max_iterations: int = 20
    damping: float = 1e-4
    damping_up: float = 10.0
    damping_down: float = 0.5
    g_tol: float = 1e-8
    f_tol: float = 1e-8


@dataclass
class SolverReport:
    iterations: int = 0
    converged: bool = False
    reason: str = ""
    initial_cost: float = float("nan")
    final_cost: float = float("nan")
    costs: list = field(default_factory=list)  # objective after each accepted step

    @property
    def monotone(self) -> bool:
        c = [self.initial_cost] + self.costs
        return all(b < a for a, b in zip(c[:-1], c[1:]))


def _evaluate(ctx, params, pts, jacobian):
    try:
        r, jac = weighted_residuals(ctx, params, pts, jacobian=jacobian)
    except OutsideFieldError:
        return None, None
    return r, jac


def optimize(init: DiscreteTrajectory, ctx: ContextSnapshot, params: CostParams,
             opts: SolverOptions = SolverOptions()) -> tuple[DiscreteTrajectory, SolverReport]:
    """Minimize the objective over all points but the first.

    Trial steps that leave the distance fields count as rejected steps.
    """
    report = SolverReport()
    pts = np.array(init.points, dtype=float)
    r, jac = _evaluate(ctx, params, pts, True)
    if r is None:
        report.reason = "initial guess outside the context region"
        return init, report
    cost = float(r @ r)
    report.initial_cost = report.final_cost = cost
    if not math.isfinite(cost) or not np.all(np.isfinite(jac)):
        report.reason = "non-finite cost or gradient"
        return init, report
    lam = opts.damping
    n_free = 2 * (len(pts) - 1)
    eye = np.eye(n_free)
    while report.iterations < opts.max_iterations:
        J = jac[:, 2:]
        g = J.T @ r
        if len(r) == 0 or np.max(np.abs(g)) < opts.g_tol:
            report.converged, report.reason = True, "gradient tolerance"
            break
        report.iterations += 1
        A = J.T @ J
        try:
            step = np.linalg.solve(A + lam * eye, -g)
        except np.linalg.LinAlgError:
            lam *= opts.damping_up
            continue
        trial = pts.copy()
        trial[1:] += step.reshape(-1, 2)
        r_new, _ = _evaluate(ctx, params, trial, False)
        new_cost = float(r_new @ r_new) if r_new is not None else math.inf
        if not math.isfinite(new_cost) and r_new is not None:
            report.reason = "non-finite cost"
            return init, report
        if new_cost < cost:
            decrease = (cost - new_cost) / max(cost, 1e-300)
            pts, cost = trial, new_cost
            report.costs.append(cost)
            lam *= opts.damping_down
            r, jac = _evaluate(ctx, params, pts, True)
            if not np.all(np.isfinite(jac)):
                report.reason = "non-finite gradient"
                return init, report
            if decrease < opts.f_tol:
                report.converged, report.reason = True, "cost tolerance"
                break
        else:
            lam *= opts.damping_up
    else:
        report.reason = "iteration cap"
    report.final_cost = cost
    return init.with_points(pts), report


# ---------------------------------------------------------------------------
# prediction rounds

@dataclass
class PredictionResult:
    agent_id: int
    trajectory: DiscreteTrajectory
    policy: PolicyLabel | None
    probs: np.ndarray
    cost_breakdown: dict
    iterations: int
    converged: bool
    warnings: frozenset
    wall_time: dict          # seconds per stage: inference, rendering, optimization
    initial_cost: float = float("nan")
    fallback: bool = False
    init: DiscreteTrajectory | None = None
    monotone: bool = True

    def metadata(self) -> dict:
        return {
            "agent_id": self.agent_id,
            "policy": self.policy.slug if self.policy is not None else None,
            "probs": [round(float(p), 9) for p in self.probs],
            "cost_breakdown": {k: float(v) for k, v in self.cost_breakdown.items()},
            "iterations": self.iterations,
            "converged": self.converged,
            "warnings": sorted(self.warnings),
            "initial_cost": self.initial_cost,
            "fallback": self.fallback,
        }

    def to_record(self, params: CostParams | None = None, timings: bool = False) -> str:
        meta = self.metadata()
        if timings:
            meta["wall_time"] = self.wall_time
        lines = [file_header(params), "# meta " + json.dumps(meta, sort_keys=True)]
        return self.trajectory.to_csv("\n".join(lines))


def _shift_prediction(traj: DiscreteTrajectory, t_now: float, n: int, h: float) -> np.ndarray:
    """Positions of an older prediction at t_now + i*h; the last velocity carries on."""
    times = t_now + h * np.arange(n)
    pts = traj.points
    tt = traj.times
    out = np.stack([np.interp(times, tt, pts[:, 0]), np.interp(times, tt, pts[:, 1])], axis=1)
    v_end = (pts[-1] - pts[-2]) / traj.h
    late = times > tt[-1]
    out[late] = pts[-1] + (times[late] - tt[-1])[:, None] * v_end
    return out


def _constant_velocity_pose(pose: PoseSample, n: int, h: float) -> np.ndarray:
    tf = h * np.arange(n)
    d = np.array([math.cos(pose.theta), math.sin(pose.theta)]) * pose.v
    return np.array([pose.x, pose.y]) + tf[:, None] * d


def other_agent_predictions(scenario: Scenario, target_id: int, t_now: float, n: int, h: float,
                            state: Mapping | None = None) -> list[tuple[int, np.ndarray]]:
    """Predicted positions of every other agent present at t_now and within range."""
    me = agent_pose_at(scenario, target_id, t_now)
    out = []
    for agent in scenario.agents:
        if agent.id == target_id or not agent.t_start - 1e-9 <= t_now <= agent.t_end + 1e-9:
            continue
        pose = agent_pose_at(scenario, agent.id, t_now)
        if math.hypot(pose.x - me.x, pose.y - me.y) > INTERACTION_RANGE:
            continue
        prev = state.get(agent.id) if state else None
        if prev is not None:
            out.append((agent.id, _shift_prediction(prev, t_now, n, h)))
        else:
            out.append((agent.id, _constant_velocity_pose(pose, n, h)))
    return out


def anchor_guess(init: DiscreteTrajectory, position) -> DiscreteTrajectory:
    """Move the first point to the observed position, fading the offset out."""
    offset = np.asarray(position, dtype=float) - init.points[0]
    k = np.arange(init.n)
    fade = np.clip(1.0 - k / ANCHOR_BLEND, 0.0, 1.0)[:, None]
    pts = init.points + fade * offset
    pts[0] = position
    return init.with_points(pts)


def build_context(scenario: Scenario, t_now: float, region: Region, ref, desired_speed,
                  mo_predictions, h: float = H_DEFAULT, cell_size: float = DEFAULT_CELL
                  ) -> ContextSnapshot:
    return ContextSnapshot(
        lane_sdf_solid=build_lane_sdf(scenario, region, cell_size, "solid"),
        lane_sdf_broken=build_lane_sdf(scenario, region, cell_size, "broken"),
        obstacle_sdf=build_obstacle_sdf(scenario, region, cell_size),
        red_lights=tuple(lt for lt in scenario.lights if lt.is_red(t_now)),
        desired_speed=np.asarray(desired_speed, dtype=float),
        reference=ref,
        mo_predictions=tuple(np.asarray(m) for m in mo_predictions),
        region=region,
        t0=t_now,
        h=h,
    )


def prepare(scenario: Scenario, target_id: int, t_now: float, probs, history,
            state: Mapping | None = None, params: CostParams = CostParams(),
            n: int = N_DEFAULT, h: float = H_DEFAULT, cell_size: float = DEFAULT_CELL):
    """Interpret a policy distribution and freeze the context; returns (interpretation, init, ctx).

    Raises NoFeasiblePolicy or GeometryError when no reference line exists.
    """
    pose = history[-1]
    others = [p for _, p in other_agent_predictions(scenario, target_id, t_now, n, h, state)]
    red = tuple(lt for lt in scenario.lights if lt.is_red(t_now))
    chosen = interpret(probs, scenario, pose, n, h, history, params, others, red)
    init = anchor_guess(chosen.init, pose.position)
    region = context_region(pose).covering(init.points, REGION_MARGIN)
    ctx = build_context(scenario, t_now, region, chosen.reference, chosen.desired_speed,
                        chosen.interacting, h, cell_size)
    return chosen, init, ctx


def target_history(scenario: Scenario, target_id: int, t_now: float, frames: int):
    try:
        return agent_history(scenario, target_id, t_now, frames)
    except ScenarioError as exc:
        raise InsufficientHistory(
            f"agent {target_id} lacks {frames} frames of history at t={t_now}: {exc}") from None


def predict(scenario: Scenario, model: RecurrentClassifier, target_id: int, t_now: float,
            state: Mapping | None = None, params: CostParams = CostParams(),
            opts: SolverOptions = SolverOptions(), n: int = N_DEFAULT, h: float = H_DEFAULT,
            cell_size: float = DEFAULT_CELL) -> PredictionResult:
    """One prediction round for one agent."""
    times = {"inference": 0.0, "rendering": 0.0, "optimization": 0.0}
    history = target_history(scenario, target_id, t_now, model.t_obs)

    t0 = time.perf_counter()
    probs = infer(model, window_features(history))
    times["inference"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    try:
        chosen, init, ctx = prepare(scenario, target_id, t_now, probs, history, state, params,
                                    n, h, cell_size)
    except (NoFeasiblePolicy, GeometryError) as exc:
        log.warning("agent %s at t=%.2f: %s; using the naive fit", target_id, t_now, exc)
        traj = naive_fit_baseline(history, n, h)
        times["rendering"] = time.perf_counter() - t0
        return PredictionResult(target_id, traj, None, probs, {}, 0, False,
                                frozenset({"fallback"}), times, fallback=True)
    times["rendering"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    init_cost = initial_guess_cost_sanity(init, ctx, params)
    traj, report = optimize(init, ctx, params, opts)
    _, breakdown = total_cost(ctx, params, traj)
    times["optimization"] = time.perf_counter() - t0

    warnings = set()
    if red_light_crossings(scenario, traj.points, t_now, h):
        warnings.add("red_light_offence")
    if not report.converged and report.reason != "iteration cap":
        warnings.add("solver_aborted")
    return PredictionResult(target_id, traj, chosen.policy, probs, breakdown, report.iterations,
                            report.converged, frozenset(warnings), times, init_cost,
                            init=init, monotone=report.monotone)


def predict_all(scenario: Scenario, model: RecurrentClassifier, t_now: float,
                state: dict | None = None, **kw) -> tuple[dict[int, PredictionResult], dict]:
    """Predict every vehicle with enough history against last round's predictions.

    Returns the results and the state for the next round; the input state is
    not modified.
    """
    snapshot = dict(state or {})
    results = {}
    for agent in sorted(scenario.agents, key=lambda a: a.id):
        if agent.kind != "vehicle":
            continue
        if agent.t_start > t_now - (model.t_obs - 1) * scenario.frame_period + 1e-9 \
                or agent.t_end < t_now - 1e-9:
            continue
        results[agent.id] = predict(scenario, model, agent.id, t_now, snapshot, **kw)
    new_state = dict(snapshot)
    new_state.update({k: r.trajectory for k, r in results.items()})
    return results, new_state
