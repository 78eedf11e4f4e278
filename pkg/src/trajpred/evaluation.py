"""Prediction error metrics, baselines comparison and scripted case replays."""

from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baselines import DEFAULT_LAMBDA_A, constant_velocity, naive_fit_baseline
from .config import CostParams, file_header
from .fixtures import load_fixture
from .policy_net import RecurrentClassifier
from .predictor import H_DEFAULT, N_DEFAULT, SolverOptions, predict_all
from .scenario import PoseSample, Scenario, agent_history, agent_pose_at
from .trajectory import DiscreteTrajectory

log = logging.getLogger(__name__)

METHODS = ("ours", "naive_fit", "constant_velocity")


def rmse(pred: DiscreteTrajectory, truth: Sequence[PoseSample]) -> np.ndarray:
    """Per-index Euclidean error between predicted points and true positions."""
    if len(truth) != pred.n:
        raise ValueError(f"truth has {len(truth)} samples, prediction {pred.n}")
    for p, t in zip(truth, pred.times):
        if abs(p.t - t) > 1e-6:
            raise ValueError(f"truth sample at t={p.t} does not match prediction time {t}")
    true_xy = np.array([[p.x, p.y] for p in truth])
    return np.linalg.norm(pred.points - true_xy, axis=1)


@dataclass
class ErrorCurve:
    """Mean and variance of the error at each look-ahead index 1..N-1."""
    h: float
    mean: np.ndarray
    var: np.ndarray
    frames: int

    @property
    def look_ahead(self) -> np.ndarray:
        return self.h * np.arange(1, len(self.mean) + 1)

    @property
    def ending(self) -> float:
        return float(self.mean[-1])

    @classmethod
    def from_errors(cls, errors: np.ndarray, h: float) -> "ErrorCurve":
        """errors: (frames, N) per-index errors; index 0 (the present) is dropped."""
        e = np.asarray(errors, dtype=float)[:, 1:]
        return cls(h, e.mean(axis=0), e.var(axis=0), e.shape[0])


@dataclass(frozen=True)
class Case:
    name: str
    t_from: float
    t_to: float
    target: int = 0
    designated_t: float | None = None


CASES = {
    "curved_road": Case("curved_road", 3.9, 16.0),
    "intersection_construction": Case("intersection_construction", 3.9, 20.0, designated_t=9.0),
    "red_light_construction": Case("red_light_construction", 4.0, 16.0, designated_t=10.0),
    "pedestrian_braking": Case("pedestrian_braking", 4.0, 14.0, designated_t=8.0),
    "red_light_offence": Case("red_light_offence", 3.9, 8.0, designated_t=6.0),
}


@dataclass
class CaseResult:
    case: Case
    curves: dict                 # method -> ErrorCurve
    instantaneous: dict          # method -> (frames,) mean error per frame
    times: np.ndarray            # frame times
    events: list = field(default_factory=list)
    predictions: dict = field(default_factory=dict)   # method -> list of trajectories

    def curve_csv(self, params: CostParams | None = None, methods=METHODS) -> str:
        buf = io.StringIO()
        buf.write(file_header(params) + "\n")
        buf.write("look_ahead_s,mean_rmse,var_rmse,method\n")
        for m in methods:
            c = self.curves[m]
            for la, mu, var in zip(c.look_ahead, c.mean, c.var):
                buf.write(f"{la:.1f},{mu:.9f},{var:.9f},{m}\n")
        return buf.getvalue()

    def frames_csv(self, params: CostParams | None = None) -> str:
        buf = io.StringIO()
        buf.write(file_header(params) + "\n")
        buf.write("t," + ",".join(METHODS) + "\n")
        for k, t in enumerate(self.times):
            buf.write(f"{t:.1f}," + ",".join(f"{self.instantaneous[m][k]:.9f}" for m in METHODS) + "\n")
        return buf.getvalue()

    def events_text(self, params: CostParams | None = None) -> str:
        return file_header(params) + "\n" + "".join(e + "\n" for e in self.events)

    def summary(self) -> dict:
        return {m: {"ending_rmse": self.curves[m].ending,
                    "mean_instantaneous": float(np.mean(self.instantaneous[m]))}
                for m in METHODS}


def truth_window(scenario: Scenario, agent_id: int, t0: float, n: int, h: float) -> list[PoseSample]:
    return [agent_pose_at(scenario, agent_id, t0 + i * h) for i in range(n)]


def frame_times(scenario: Scenario, case: Case, n: int, h: float, t_obs: int) -> np.ndarray:
    """Frames in the case span that have T_obs history and a full scripted future."""
    agent = scenario.agent(case.target)
    fp = scenario.frame_period
    t_lo = max(case.t_from, agent.t_start + (t_obs - 1) * fp)
    t_hi = min(case.t_to, agent.t_end - (n - 1) * h)
    k0 = int(np.ceil(t_lo / fp - 1e-9))
    k1 = int(np.floor(t_hi / fp + 1e-9))
    return np.round(np.arange(k0, k1 + 1) * fp, 9)


def run_case(name: str, model: RecurrentClassifier, params: CostParams = CostParams(),
             opts: SolverOptions = SolverOptions(), n: int = N_DEFAULT, h: float = H_DEFAULT,
             lambda_a: float = DEFAULT_LAMBDA_A, scenario: Scenario | None = None,
             keep_predictions: bool = False) -> CaseResult:
    """Replay a case frame by frame and score all three methods."""
    case = CASES[name]
    scenario = scenario or load_fixture(name)
    times = frame_times(scenario, case, n, h, model.t_obs)
    if len(times) == 0:
        raise ValueError(f"case {name}: no frame has both history and a full future")
    errors = {m: [] for m in METHODS}
    preds = {m: [] for m in METHODS}
    events = []
    state: dict = {}
    for t in times:
        t = float(t)
        results, state = predict_all(scenario, model, t, state, params=params, opts=opts, n=n, h=h)
        ours = results[case.target]
        history = agent_history(scenario, case.target, t, model.t_obs)
        trajs = {
            "ours": ours.trajectory,
            "naive_fit": naive_fit_baseline(history, n, h, lambda_a),
            "constant_velocity": constant_velocity(history, n, h),
        }
        truth = truth_window(scenario, case.target, t, n, h)
        for m, traj in trajs.items():
            errors[m].append(rmse(traj, truth))
            if keep_predictions:
                preds[m].append(traj)
        for w in sorted(ours.warnings):
            events.append(f"t={t:.1f} agent={case.target} {w}")
        policy = ours.policy.slug if ours.policy is not None else "fallback"
        log.debug("case %s t=%.1f policy=%s", name, t, policy)
    curves = {m: ErrorCurve.from_errors(np.array(errors[m]), h) for m in METHODS}
    inst = {m: np.array(errors[m])[:, 1:].mean(axis=1) for m in METHODS}
    return CaseResult(case, curves, inst, times, events, preds if keep_predictions else {})


def write_case(result: CaseResult, out_dir: str | Path, params: CostParams | None = None) -> list[Path]:
    """Write one curve CSV per method, the per-frame CSV, a summary and the event log."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = result.case.name
    paths = []
    for m in METHODS:
        p = out / f"{name}_{m}.csv"
        p.write_text(result.curve_csv(params, methods=(m,)), encoding="utf-8")
        paths.append(p)
    p = out / f"{name}_frames.csv"
    p.write_text(result.frames_csv(params), encoding="utf-8")
    paths.append(p)
    p = out / f"{name}_summary.csv"
    lines = [file_header(params), "method,ending_rmse,mean_instantaneous"]
    for m, s in result.summary().items():
        lines.append(f"{m},{s['ending_rmse']:.9f},{s['mean_instantaneous']:.9f}")
    p.write_text("\n".join(lines) + "\n", encoding="utf-8")
    paths.append(p)
    p = out / f"{name}_events.txt"
    p.write_text(result.events_text(params), encoding="utf-8")
    paths.append(p)
    return paths
