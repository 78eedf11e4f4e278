"""Acceptance suite: one test per criterion, at the stated tolerances.

A summary line per criterion is printed at the end of the pytest run.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from trajpred.cli import main as cli_main
from trajpred.config import CostParams
from trajpred.costs import TERMS, term_blocks, weighted_residuals
from trajpred.evaluation import CASES, run_case
from trajpred.fixtures import load_fixture
from trajpred.geometry import Region, build_lane_sdf, extract_reference_line, inside_corridors
from trajpred.labels import PolicyLabel
from trajpred.policy_net import TrainConfig, build_dataset, train
from trajpred.predictor import (build_context, optimize, predict, prepare,
                                target_history)
from trajpred.baselines import naive_fit_baseline
from trajpred.scenario import agent_pose_at
from trajpred.simulator import label_round_trip, maneuver_pack, sample_params
from trajpred.trajectory import EPS_SPEED, DiscreteTrajectory


def detail(request, text):
    request.node.user_properties.append(("detail", text))
    print(text)


def terminal_speed(traj: DiscreteTrajectory) -> float:
    return float(np.linalg.norm(traj.points[-1] - traj.points[-2]) / traj.h)


# ---------------------------------------------------------------------------
# 1. gradients

def dense(block, n):
    """Block gradient as a dense (m, n, 2) array."""
    out = np.zeros((len(block.rho), n, 2))
    for j in range(3):
        np.add.at(out, (np.arange(len(block.rho)), block.idx[:, j]), block.grad[:, j])
    return out


def fd_jacobians(ctx, params, pts, blocks, eps=1e-6):
    """Central differences of every term block, three points per perturbation.

    Each residual touches at most three consecutive points, so perturbing every
    third point at once recovers each residual's derivative without overlap.
    """
    n = len(pts)
    out = {t: np.zeros((len(b.rho), n, 2)) for t, b in blocks.items()}
    for g in range(3):
        group = np.arange(g, n, 3)
        for c in range(2):
            plus, minus = pts.copy(), pts.copy()
            plus[group, c] += eps
            minus[group, c] -= eps
            bp = term_blocks(ctx, params, plus)
            bm = term_blocks(ctx, params, minus)
            for t in out:
                col = (bp[t].rho - bm[t].rho) / (2 * eps)
                # the one point of each residual's window [i, i+2] that moved
                first = blocks[t].idx[:, 0]
                moved = first + (g - first) % 3
                rows = np.nonzero(moved < n)[0]
                out[t][rows, moved[rows], c] = col[rows]
    return out


def gradient_contexts():
    """(context, sampler) pairs covering all seven terms, straight and curved references."""
    out = []
    sc = load_fixture("red_light_construction")
    pose = agent_pose_at(sc, 0, 5.0)
    ref = extract_reference_line(sc, pose, PolicyLabel.FORWARD, 120.0)
    region = Region(-10.0, -35.0, 12.0, 50.0)
    # the line starts at y = -25; the stop line is at y = 0 and the works at y = 14..22
    out.append((sc, ref, region, (5.0, 30.0), (1.0, 7.0)))
    sc = load_fixture("curved_road")
    pose = agent_pose_at(sc, 0, 6.0)
    ref = extract_reference_line(sc, pose, PolicyLabel.FORWARD, 120.0)
    region = Region(30.0, -15.0, 115.0, 70.0)
    out.append((sc, ref, region, (0.0, 15.0), (2.0, 10.0)))
    built = []
    for sc, ref, region, s_span, v_span in out:
        ctx = build_context(sc, 6.0, region, ref, np.zeros(39), (), 0.1, 1.0)
        built.append((ctx, ref, region, s_span, v_span))
    return built


def random_configuration(rng, ctx, ref, region, s_span, v_span, n=40, h=0.1):
    v = rng.uniform(*v_span)
    s0 = rng.uniform(*s_span)
    s = s0 + v * h * np.arange(n) + rng.uniform(-1.5, 0.0) * (h * np.arange(n)) ** 2
    base = ref.point_at(s)
    lateral = rng.uniform(-2.5, 2.5) * np.sin(np.linspace(0, rng.uniform(0.5, 3.0) * np.pi, n))
    normal = np.stack([-np.gradient(base[:, 1]), np.gradient(base[:, 0])], axis=1)
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    noise = rng.choice([0.01, 0.05, 0.2]) * rng.standard_normal((n, 2))
    pts = base + lateral[:, None] * normal + noise
    pts[:, 0] = np.clip(pts[:, 0], region.xmin + 1, region.xmax - 1)
    pts[:, 1] = np.clip(pts[:, 1], region.ymin + 1, region.ymax - 1)
    other = pts + rng.uniform(-5, 5, size=2) + 0.3 * rng.standard_normal((n, 2))
    desired = rng.uniform(0.0, 12.0, size=n - 1)
    ctx = replace(ctx, desired_speed=desired, mo_predictions=(other,))
    return ctx, pts


@pytest.mark.criterion(1, "gradient correctness, 200 configurations, FD step 1e-6")
def test_c01_gradients(request):
    rng = np.random.default_rng(1)
    params = CostParams()
    contexts = gradient_contexts()
    worst = {t: 0.0 for t in TERMS}
    active = {t: 0 for t in TERMS}
    t0 = time.perf_counter()
    for k in range(200):
        ctx, pts = random_configuration(rng, *contexts[k % len(contexts)])
        blocks = term_blocks(ctx, params, pts)
        fd = fd_jacobians(ctx, params, pts, blocks)
        for t, b in blocks.items():
            ana = dense(b, len(pts))
            scale = float(np.max(np.abs(fd[t]))) if fd[t].size else 0.0
            if scale == 0.0:
                assert np.max(np.abs(ana), initial=0.0) == 0.0
                continue
            active[t] += 1
            worst[t] = max(worst[t], float(np.max(np.abs(ana - fd[t]))) / scale)
    elapsed = time.perf_counter() - t0
    detail(request, f"max rel err {max(worst.values()):.2e}, {elapsed:.1f} s, "
                    + " ".join(f"{t}={worst[t]:.1e}/{active[t]}" for t in TERMS))
    assert all(active[t] > 0 for t in TERMS), active
    assert max(worst.values()) < 1e-4
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 2. convex sanity

@pytest.mark.criterion(2, "speed-only problem solved exactly in <= 5 iterations")
def test_c02_convex_sanity(request):
    sc = load_fixture("straight_lane")
    pose = agent_pose_at(sc, 0, 5.0)
    ref = extract_reference_line(sc, pose, PolicyLabel.FORWARD, 80.0)
    rng = np.random.default_rng(2)
    n, h = 40, 0.1
    speeds = rng.uniform(5.0, 12.0, size=n - 1)
    region = Region(pose.x - 20, -25.0, pose.x + 80, 25.0)
    ctx = build_context(sc, 5.0, region, ref, speeds, (), h, 1.0)
    params = CostParams().only("w_v")
    truth = np.zeros((n, 2))
    truth[0] = [pose.x, pose.y]
    truth[1:] = truth[0] + np.cumsum(speeds[:, None] * h * np.array([1.0, 0.0]), axis=0)
    init = truth + np.vstack([[0, 0], rng.normal(0, 1.0, size=(n - 1, 2))])
    traj, report = optimize(DiscreteTrajectory(init, 5.0, h), ctx, params)
    err = float(np.max(np.abs(traj.points - truth)))
    detail(request, f"J={report.final_cost:.2e}, {report.iterations} iterations, max err {err:.1e} m")
    assert report.final_cost < 1e-8
    assert report.iterations <= 5
    assert err < 1e-6


# ---------------------------------------------------------------------------
# 3. multimodality

@pytest.mark.criterion(3, "turn-left vs forward endpoints > 3.5 m apart, monotone J")
def test_c03_multimodality(request, model):
    sc = load_fixture("intersection_construction")
    t = CASES["intersection_construction"].designated_t
    history = target_history(sc, 0, t, model.t_obs)
    ends, notes = {}, []
    for label in (PolicyLabel.FORWARD, PolicyLabel.TURN_LEFT):
        probs = np.zeros(6)
        probs[label] = 1.0
        chosen, init, ctx = prepare(sc, 0, t, probs, history)
        assert chosen.policy == label
        traj, report = optimize(init, ctx, CostParams())
        ends[label] = traj.points[-1]
        notes.append(f"{label.slug}: {report.iterations} it, {report.reason}")
        assert report.converged, report.reason
        assert report.monotone
    sep = float(np.linalg.norm(ends[PolicyLabel.FORWARD] - ends[PolicyLabel.TURN_LEFT]))
    detail(request, f"t={t}, separation {sep:.2f} m; " + "; ".join(notes))
    assert sep > 3.5


# ---------------------------------------------------------------------------
# 4. red lights

@pytest.mark.criterion(4, "low speed stops >= 0.5 m before the line, high speed offends")
def test_c04_red_light(request, model):
    runs = []
    for _ in range(2):
        sc = load_fixture("red_light_construction")
        slow = predict(sc, model, 0, CASES["red_light_construction"].designated_t)
        sc = load_fixture("red_light_offence")
        fast = predict(sc, model, 0, CASES["red_light_offence"].designated_t)
        runs.append((slow, fast))
    (slow, fast), (slow2, fast2) = runs
    # stop line at y = 0, approached in +y
    slow_front = float(np.max(slow.trajectory.points[:, 1]))
    fast_front = float(np.max(fast.trajectory.points[:, 1]))
    detail(request, f"slow stops {-slow_front:.2f} m short, fast reaches y={fast_front:.1f}, "
                    f"warnings {sorted(fast.warnings)}")
    assert slow_front <= -0.5
    assert "red_light_offence" not in slow.warnings
    assert fast_front > 0.0
    assert "red_light_offence" in fast.warnings
    assert slow.trajectory == slow2.trajectory and fast.trajectory == fast2.trajectory
    assert slow.warnings == slow2.warnings and fast.warnings == fast2.warnings


# ---------------------------------------------------------------------------
# 5. curved road

@pytest.mark.criterion(5, "curved road ending RMSE <= 50% of naive fit")
def test_c05_curved_road(request, model):
    result = run_case("curved_road", model)
    ours = result.curves["ours"].ending
    naive = result.curves["naive_fit"].ending
    detail(request, f"ours {ours:.3f} m vs naive {naive:.3f} m over {len(result.times)} frames")
    assert ours <= 0.5 * naive


# ---------------------------------------------------------------------------
# 6. pedestrian

@pytest.mark.criterion(6, "pedestrian: ours terminal speed < 30%, naive > 70%")
def test_c06_pedestrian(request, model):
    sc = load_fixture("pedestrian_braking")
    t = CASES["pedestrian_braking"].designated_t
    v_now = agent_pose_at(sc, 0, t).v
    ours = predict(sc, model, 0, t)
    naive = naive_fit_baseline(target_history(sc, 0, t, model.t_obs))
    r_ours = terminal_speed(ours.trajectory) / v_now
    r_naive = terminal_speed(naive) / v_now
    detail(request, f"ours {100 * r_ours:.1f}%, naive {100 * r_naive:.1f}% of {v_now:.1f} m/s")
    assert r_ours < 0.3
    assert r_naive > 0.7


# ---------------------------------------------------------------------------
# 7. classifier

@pytest.mark.slow
@pytest.mark.criterion(7, "classifier >= 90% held-out accuracy, trained in < 10 min")
def test_c07_classifier(request):
    ds = build_dataset([a for _, a in maneuver_pack(60, 0)])
    counts = ds.histogram()
    assert min(counts.values()) >= 500, counts
    t0 = time.perf_counter()
    _, history = train(ds, TrainConfig(), seed=0)
    elapsed = time.perf_counter() - t0
    acc = history[-1].val_acc
    detail(request, f"val acc {100 * acc:.1f}% in {elapsed:.0f} s, min label count "
                    f"{min(counts.values())}")
    assert acc >= 0.9
    assert elapsed < 600


# ---------------------------------------------------------------------------
# 8. labeler round trip

@pytest.mark.criterion(8, "labeler round trip >= 99% of 600 tracks")
def test_c08_round_trip(request):
    rng = np.random.default_rng(8)
    hits, failures = 0, []
    for kind in PolicyLabel:
        for _ in range(100):
            params = sample_params(kind, rng)
            seed = int(rng.integers(0, 2 ** 31))
            got = label_round_trip(kind, params, seed)
            hits += got == kind
            if got != kind:
                failures.append(f"{kind.slug}->{got.slug}")
    detail(request, f"{hits}/600" + (f", failures {failures}" if failures else ""))
    assert hits >= 594


# ---------------------------------------------------------------------------
# 9. runtime

@pytest.mark.slow
@pytest.mark.criterion(9, "average predict round < 100 ms over 500 rounds")
def test_c09_runtime(request, model):
    sc = load_fixture("intersection_construction")
    h = sc.frame_period
    t_lo = (model.t_obs - 1) * h
    frames = np.round(np.arange(int(round(t_lo / h)), int(round(20.0 / h)) + 1) * h, 9)
    stages = {"inference": 0.0, "rendering": 0.0, "optimization": 0.0}
    total = 0.0
    state: dict = {}
    for k in range(500):
        t = float(frames[k % len(frames)])
        if k % len(frames) == 0:
            state = {}
        t0 = time.perf_counter()
        res = predict(sc, model, 0, t, state)
        total += time.perf_counter() - t0
        state = {0: res.trajectory}
        for s in stages:
            stages[s] += res.wall_time[s]
    avg = 1000 * total / 500
    parts = ", ".join(f"{s} {1000 * v / 500:.1f}" for s, v in stages.items())
    detail(request, f"total {avg:.1f} ms ({parts})")
    assert avg < 100.0


# ---------------------------------------------------------------------------
# 10. determinism

@pytest.mark.slow
@pytest.mark.criterion(10, "eval twice gives byte-identical CSVs")
def test_c10_determinism(request, tmp_path):
    for run in ("a", "b"):
        assert cli_main(["eval", "--case", "all", "--out", str(tmp_path / run)]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    csvs = [f for f in files if f.endswith(".csv")]
    assert csvs and files == sorted(p.name for p in (tmp_path / "b").iterdir())
    same = [f for f in files if (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()]
    detail(request, f"{len(same)}/{len(files)} files identical across {len(CASES)} cases")
    assert same == files


# ---------------------------------------------------------------------------
# 11. small-instance oracle

def straight_lane_objective(X, speeds, other, params, h):
    """Objective for a batch (B, N, 2) of trajectories on the straight 4 m lane along y = 0.

    Written out from the term definitions, independently of the cost module.
    """
    P = params
    hinge = lambda z: np.maximum(z, 0.0)
    d = 2.0 - np.abs(X[..., 1])
    J = P.w_g * P.alpha_g * np.sum(hinge(P.tau_b - d) ** 2, -1)
    dist = np.linalg.norm(X - other, axis=-1)
    J = J + P.w_d * P.alpha_d * np.sum(hinge(P.tau_o - dist) ** 2, -1)
    v = np.diff(X, axis=-2) / h
    J = J + P.w_v * np.sum((v[..., 0] - speeds) ** 2 + v[..., 1] ** 2, -1)
    a = (X[..., 2:, :] - 2 * X[..., 1:-1, :] + X[..., :-2, :]) / h ** 2
    vf = v[..., 1:, :]
    q = np.sum(vf * vf, -1)
    cross = vf[..., 0] * a[..., 1] - vf[..., 1] * a[..., 0]
    kappa = np.where(q >= EPS_SPEED ** 2, cross / np.maximum(q, 1e-300) ** 1.5, 0.0)
    J = J + P.w_kappa * P.alpha_kappa * np.sum(hinge(np.abs(kappa) - P.kappa_max) ** 2, -1)
    J = J + P.w_a * P.alpha_a * np.sum(hinge(np.linalg.norm(a, axis=-1) - P.a_max) ** 2, -1)
    return h * J


def coordinate_descent(f, x, rel=1e-12, max_sweeps=3000, grid_size=41):
    """Derivative-free minimizer of a batched f over the rows 1.. of x.

    Each coordinate is searched on a grid that zooms into the bracketing cells;
    a minimum on the grid edge restarts the search from there.
    """
    x = x.copy()
    best = float(f(x[None])[0])
    grid = np.linspace(-1.0, 1.0, grid_size)
    zoom = 2.0 / (grid_size - 1)
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        start = best
        for i in range(1, len(x)):
            for c in range(2):
                s = 1.0
                while s > 1e-12:
                    cand = np.repeat(x[None], grid_size, 0)
                    cand[:, i, c] += s * grid
                    vals = f(cand)
                    k = int(np.argmin(vals))
                    edge = k in (0, grid_size - 1)
                    improved = vals[k] < best
                    if improved:
                        x, best = cand[k], float(vals[k])
                    if not (edge and improved):
                        s *= zoom
        if start - best <= rel * max(best, 1e-300):
            break
    return x, best, sweeps


def oracle_problem(rng, pose, n, h):
    v = rng.uniform(5.0, 14.0)
    speeds = np.clip(v + rng.normal(0, 1.0, size=n - 1), 0, None)
    tt = h * np.arange(n)
    x = pose.x + v * rng.uniform(0.8, 1.2) * tt
    y = (pose.y + rng.uniform(-1.5, 1.5) * np.clip(tt / 0.4, 0, 1)
         + 0.3 * np.sin(np.pi * tt / tt[-1] * rng.uniform(0.5, 2)))
    init = np.stack([x, y], 1)
    init[0] = [pose.x, pose.y]
    other = init + np.array([rng.uniform(2, 10), rng.uniform(-4, 4)])
    return speeds, init, other


@pytest.mark.slow
@pytest.mark.criterion(11, "LM cost <= 1.01 x coordinate-descent oracle on 10 N=8 problems")
def test_c11_oracle(request):
    sc = load_fixture("straight_lane")
    pose = agent_pose_at(sc, 0, 5.0)
    ref = extract_reference_line(sc, pose, PolicyLabel.FORWARD, 60.0)
    rng = np.random.default_rng(11)
    n, h = 8, 0.1
    params = CostParams()
    region = Region(pose.x - 20, -20.0, pose.x + 40, 20.0)
    ratios, reasons = [], []
    for _ in range(10):
        speeds, init, other = oracle_problem(rng, pose, n, h)
        ctx = build_context(sc, 5.0, region, ref, speeds, (other,), h, 1.0)
        f = lambda X: straight_lane_objective(X, speeds, other, params, h)

        def cost(pts):
            r, _ = weighted_residuals(ctx, params, pts, jacobian=False)
            return float(r @ r)

        traj, report = optimize(DiscreteTrajectory(init, 5.0, h), ctx, params)
        # search over increments so that moving one coordinate shifts the tail rigidly
        x0 = init[0]
        to_pts = lambda D: np.concatenate(
            [np.broadcast_to(x0, D.shape[:-2] + (1, 2)), x0 + np.cumsum(D[..., 1:, :], -2)], -2)
        D0 = np.vstack([[0.0, 0.0], np.diff(init, axis=0)])
        D, oracle, _ = coordinate_descent(lambda D: f(to_pts(D)), D0)
        for pts in (init, traj.points, to_pts(D)):
            assert f(pts[None])[0] == pytest.approx(cost(pts), rel=1e-9, abs=1e-12)
        ratios.append(report.final_cost / oracle if oracle > 0 else
                      (1.0 if report.final_cost == 0 else math.inf))
        reasons.append(report.reason)
    stops = ", ".join(f"{reasons.count(r)} {r}" for r in sorted(set(reasons)))
    detail(request, f"worst ratio {max(ratios):.4f}, {sum(r <= 1.01 for r in ratios)}/10 "
                    f"within 1.01; LM stops: {stops}")
    assert max(ratios) <= 1.01


# ---------------------------------------------------------------------------
# 12. SDF

@pytest.mark.criterion(12, "straight-lane SDF within one cell, exact sign at 1000 points")
def test_c12_sdf(request):
    sc = load_fixture("straight_lane")
    rng = np.random.default_rng(12)
    cell = 1.0
    ox, oy = rng.uniform(0, 1, size=2)
    region = Region(40.0 + ox, -10.0 + oy, 120.0 + ox, 10.0 + oy)
    field = build_lane_sdf(sc, region, cell, "solid")
    pts = np.stack([rng.uniform(50.0, 110.0, 1000), rng.uniform(-8.0, 8.0, 1000)], axis=1)
    vals, _ = field.sample_many(pts)
    # lane along y = 0, 4 m wide, far from both ends
    analytic = 2.0 - np.abs(pts[:, 1])
    inside = inside_corridors(sc, pts)
    err = float(np.max(np.abs(vals - analytic)))
    agree = float(np.mean((vals > 0) == inside))
    detail(request, f"max err {err:.3f} m, sign agreement {100 * agree:.1f}%")
    assert err <= cell
    assert agree == 1.0
