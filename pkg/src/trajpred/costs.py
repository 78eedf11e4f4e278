"""Cost terms of the trajectory objective as residuals with analytic Jacobians.

Every term is a sum of squares f = sum(rho^2); the objective is

    J = sum_i (w_g f_g + w_s f_s + w_d sum_j f_d^j + w_r f_r + w_v f_v
               + w_kappa f_kappa + w_a f_a) * h

so the least-squares residual of a row is sqrt(w * h) * rho. Each row touches
at most three consecutive trajectory points.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import CostParams
from .geometry import (DistanceField, ReferenceLine, Region, red_light_query,
                       lane_matches)
from .trajectory import EPS_SPEED, DiscreteTrajectory

TERMS = ("lane", "obstacle", "moving", "red_light", "speed", "curvature", "acceleration")
WEIGHT_OF = {
    "lane": "w_g", "obstacle": "w_s", "moving": "w_d", "red_light": "w_r",
    "speed": "w_v", "curvature": "w_kappa", "acceleration": "w_a",
}


@dataclass(frozen=True, eq=False)
class ContextSnapshot:
    """Everything one optimization round sees, frozen at the prediction epoch."""
    lane_sdf_solid: DistanceField
    lane_sdf_broken: DistanceField
    obstacle_sdf: DistanceField
    red_lights: tuple = ()                 # lights that are red at the epoch
    desired_speed: np.ndarray = field(default_factory=lambda: np.zeros(0))  # per velocity index
    reference: ReferenceLine | None = None
    mo_predictions: tuple = ()             # (N, 2) arrays, one per interacting agent
    region: Region | None = None
    t0: float = 0.0
    h: float = 0.1


@dataclass
class Block:
    """Unweighted residual rows of one term: rho (m,), point indices (m, 3), d rho / d point (m, 3, 2)."""
    rho: np.ndarray
    idx: np.ndarray
    grad: np.ndarray

    @classmethod
    def empty(cls) -> "Block":
        return cls(np.zeros(0), np.zeros((0, 3), dtype=int), np.zeros((0, 3, 2)))

    @property
    def value(self) -> float:
        return float(np.sum(self.rho ** 2))


def _point_block(rho, grad, idx) -> Block:
    m = len(rho)
    I = np.zeros((m, 3), dtype=int)
    G = np.zeros((m, 3, 2))
    I[:, 0] = idx
    G[:, 0] = grad
    return Block(rho, I, G)


def _barrier(dist: np.ndarray, grad: np.ndarray, alpha: float, tau: float):
    """rho = sqrt(alpha) * max(0, tau - d); the two-sided bi-SDF form."""
    active = dist <= tau
    ra = np.sqrt(alpha)
    rho = np.where(active, ra * (tau - dist), 0.0)
    g = np.where(active[:, None], -ra * grad, 0.0)
    return rho, g


# ---------------------------------------------------------------------------
# term blocks (vectorized over trajectory indices)

def lane_block(ctx: ContextSnapshot, params: CostParams, points: np.ndarray) -> Block:
    n = len(points)
    d, g = ctx.lane_sdf_solid.sample_many(points)
    rho1, g1 = _barrier(d, g, params.alpha_g, params.tau_b)
    d, g = ctx.lane_sdf_broken.sample_many(points)
    rho2, g2 = _barrier(d, g, params.alpha_g_broken, params.tau_b)
    idx = np.arange(n)
    return _point_block(np.concatenate([rho1, rho2]), np.concatenate([g1, g2]),
                        np.concatenate([idx, idx]))


def obstacle_block(ctx: ContextSnapshot, params: CostParams, points: np.ndarray) -> Block:
    d, g = ctx.obstacle_sdf.sample_many(points)
    rho, gr = _barrier(d, g, params.alpha_g, params.tau_b)
    return _point_block(rho, gr, np.arange(len(points)))


def moving_block(ctx: ContextSnapshot, params: CostParams, points: np.ndarray) -> Block:
    if not ctx.mo_predictions:
        return Block.empty()
    rhos, grads, idxs = [], [], []
    ra = np.sqrt(params.alpha_d)
    n = len(points)
    for other in ctx.mo_predictions:
        diff = points - np.asarray(other)[:n]
        dist = np.linalg.norm(diff, axis=1)
        active = dist < params.tau_o
        rho = np.where(active, ra * (params.tau_o - dist), 0.0)
        safe = np.where(dist > 0, dist, 1.0)
        g = np.where((active & (dist > 0))[:, None], -ra * diff / safe[:, None], 0.0)
        rhos.append(rho)
        grads.append(g)
        idxs.append(np.arange(n))
    return _point_block(np.concatenate(rhos), np.concatenate(grads), np.concatenate(idxs))


def red_light_block(ctx: ContextSnapshot, params: CostParams, points: np.ndarray) -> Block:
    n = len(points)
    m = n - 1
    rho = np.zeros(m)
    idx = np.zeros((m, 3), dtype=int)
    idx[:, 0] = np.arange(m)
    idx[:, 1] = np.arange(1, n)
    grad = np.zeros((m, 3, 2))
    if not ctx.red_lights:
        return Block(rho, idx, grad)
    h = ctx.h
    dist, normal = red_light_query(ctx.red_lights, points[:-1])
    vel = (points[1:] - points[:-1]) / h
    along = np.einsum("ij,ij->i", vel, normal)
    active = (dist > 0) & (dist <= params.tau_r) & (along > 0)
    ra = np.sqrt(params.alpha_r)
    gap = np.where(active, params.tau_r - dist, 0.0)
    s = np.where(active, along, 0.0)
    rho[:] = ra * gap * s
    # d(dist)/dx_i = -normal, d(along)/dx_i = -normal/h, d(along)/dx_{i+1} = normal/h
    grad[:, 0] = ra * (s[:, None] * normal - gap[:, None] * normal / h)
    grad[:, 1] = ra * gap[:, None] * normal / h
    return Block(rho, idx, grad)


def speed_block(ctx: ContextSnapshot, params: CostParams, points: np.ndarray) -> Block:
    n = len(points)
    m = n - 1
    h = ctx.h
    vel = (points[1:] - points[:-1]) / h
    speed = np.asarray(ctx.desired_speed, dtype=float)[:m]
    if ctx.reference is None:
        u = np.zeros((m, 2))
        ju = np.zeros((m, 2, 2))
    else:
        u, ju = ctx.reference.direction_at(points[:-1])
    res = vel - speed[:, None] * u          # (m, 2): x and y rows
    rho = res.reshape(-1)
    idx = np.zeros((2 * m, 3), dtype=int)
    idx[:, 0] = np.repeat(np.arange(m), 2)
    idx[:, 1] = idx[:, 0] + 1
    grad = np.zeros((2 * m, 3, 2))
    eye = np.eye(2)
    # row c of residual i: d/dx_i = -e_c/h - speed * d u_c/dx_i ; d/dx_{i+1} = e_c/h
    gi = -eye[None, :, :] / h - speed[:, None, None] * ju
    grad[:, 0] = gi.reshape(2 * m, 2)
    grad[:, 1] = np.tile(eye / h, (m, 1))
    return Block(rho, idx, grad)


def curvature_block(ctx: ContextSnapshot, params: CostParams, points: np.ndarray) -> Block:
    n = len(points)
    h = ctx.h
    m = n - 2
    v = (points[2:] - points[1:-1]) / h               # forward difference at i = 1..N-2
    a = (points[2:] - 2 * points[1:-1] + points[:-2]) / h ** 2
    q = np.einsum("ij,ij->i", v, v)
    moving = q >= EPS_SPEED ** 2
    qs = np.where(moving, q, 1.0)
    c = v[:, 0] * a[:, 1] - v[:, 1] * a[:, 0]
    kappa = np.where(moving, c / qs ** 1.5, 0.0)
    sgn = np.sign(kappa)
    active = moving & (np.abs(kappa) > params.kappa_max)
    ra = np.sqrt(params.alpha_kappa)
    rho = np.where(active, ra * (np.abs(kappa) - params.kappa_max), 0.0)
    dk_dv = (np.stack([a[:, 1], -a[:, 0]], axis=1) / qs[:, None] ** 1.5
             - 3.0 * c[:, None] * v / qs[:, None] ** 2.5)
    dk_da = np.stack([-v[:, 1], v[:, 0]], axis=1) / qs[:, None] ** 1.5
    scale = np.where(active, ra * sgn, 0.0)[:, None]
    idx = np.stack([np.arange(m), np.arange(1, m + 1), np.arange(2, m + 2)], axis=1)
    grad = np.zeros((m, 3, 2))
    grad[:, 0] = scale * (dk_da / h ** 2)
    grad[:, 1] = scale * (-dk_dv / h - 2.0 * dk_da / h ** 2)
    grad[:, 2] = scale * (dk_dv / h + dk_da / h ** 2)
    return Block(rho, idx, grad)


def acceleration_block(ctx: ContextSnapshot, params: CostParams, points: np.ndarray) -> Block:
    n = len(points)
    h = ctx.h
    m = n - 2
    a = (points[2:] - 2 * points[1:-1] + points[:-2]) / h ** 2
    norm = np.linalg.norm(a, axis=1)
    active = norm > params.a_max
    ra = np.sqrt(params.alpha_a)
    rho = np.where(active, ra * (norm - params.a_max), 0.0)
    unit = np.where(active[:, None], a / np.where(norm > 0, norm, 1.0)[:, None], 0.0)
    idx = np.stack([np.arange(m), np.arange(1, m + 1), np.arange(2, m + 2)], axis=1)
    grad = np.zeros((m, 3, 2))
    grad[:, 0] = ra * unit / h ** 2
    grad[:, 1] = -2.0 * ra * unit / h ** 2
    grad[:, 2] = ra * unit / h ** 2
    return Block(rho, idx, grad)


BLOCKS = {
    "lane": lane_block,
    "obstacle": obstacle_block,
    "moving": moving_block,
    "red_light": red_light_block,
    "speed": speed_block,
    "curvature": curvature_block,
    "acceleration": acceleration_block,
}


def term_blocks(ctx: ContextSnapshot, params: CostParams, points: np.ndarray,
                terms: Sequence[str] = TERMS) -> dict[str, Block]:
    points = np.asarray(points, dtype=float)
    return {t: BLOCKS[t](ctx, params, points) for t in terms}


def weighted_residuals(ctx: ContextSnapshot, params: CostParams, points: np.ndarray,
                       jacobian: bool = True):
    """Stacked residual vector r with J = r @ r, and dr/d(points) as (m, 2N)."""
    n = len(points)
    rows, jac_parts = [], []
    for term, block in term_blocks(ctx, params, points).items():
        w = getattr(params, WEIGHT_OF[term])
        if w == 0.0 or len(block.rho) == 0:
            continue
        scale = np.sqrt(w * ctx.h)
        rows.append(scale * block.rho)
        if jacobian:
            m = len(block.rho)
            jac = np.zeros((m, 2 * n))
            r = np.repeat(np.arange(m), 3)
            cols = (2 * block.idx).reshape(-1)
            g = scale * block.grad.reshape(-1, 2)
            np.add.at(jac, (r, cols), g[:, 0])
            np.add.at(jac, (r, cols + 1), g[:, 1])
            jac_parts.append(jac)
    if not rows:
        return np.zeros(0), np.zeros((0, 2 * n)) if jacobian else None
    r = np.concatenate(rows)
    return r, (np.vstack(jac_parts) if jacobian else None)


# ---------------------------------------------------------------------------
# per-term operations (unweighted value and gradient)

def lane_cost(ctx: ContextSnapshot, params: CostParams, p) -> tuple[float, np.ndarray]:
    b = lane_block(ctx, params, np.asarray(p, dtype=float)[None, :])
    return b.value, 2.0 * np.einsum("m,mc->c", b.rho, b.grad[:, 0])


def obstacle_cost(ctx: ContextSnapshot, params: CostParams, p) -> tuple[float, np.ndarray]:
    b = obstacle_block(ctx, params, np.asarray(p, dtype=float)[None, :])
    return b.value, 2.0 * np.einsum("m,mc->c", b.rho, b.grad[:, 0])


def _indexed(block: Block, n: int, rows: np.ndarray) -> tuple[float, np.ndarray]:
    """Value and (N, 2) gradient of the selected rows."""
    grad = np.zeros((n, 2))
    rho = block.rho[rows]
    for col in range(3):
        np.add.at(grad, block.idx[rows, col], 2.0 * rho[:, None] * block.grad[rows, col])
    return float(np.sum(rho ** 2)), grad


def moving_obstacle_cost(ctx, params, traj: DiscreteTrajectory, i: int):
    """Sum over agents at index i; gradient w.r.t. x_i."""
    b = moving_block(ctx, params, traj.points)
    if len(b.rho) == 0:
        return 0.0, np.zeros(2)
    rows = np.nonzero(b.idx[:, 0] == i)[0]
    val, grad = _indexed(b, traj.n, rows)
    return val, grad[i]


def red_light_cost(ctx, params, traj: DiscreteTrajectory, i: int):
    """Value and gradients w.r.t. (x_i, x_{i+1})."""
    if not 0 <= i < traj.n - 1:
        raise IndexError(i)
    b = red_light_block(ctx, params, traj.points)
    val, grad = _indexed(b, traj.n, np.array([i]))
    return val, grad[i:i + 2]


def speed_cost(ctx, params, traj: DiscreteTrajectory, i: int):
    if not 0 <= i < traj.n - 1:
        raise IndexError(i)
    b = speed_block(ctx, params, traj.points)
    val, grad = _indexed(b, traj.n, np.array([2 * i, 2 * i + 1]))
    return val, grad[i:i + 2]


def curvature_cost(params, traj: DiscreteTrajectory, i: int, ctx=None):
    """Value and gradients over (x_{i-1}, x_i, x_{i+1})."""
    if not 1 <= i < traj.n - 1:
        raise IndexError(i)
    b = curvature_block(_bare(traj) if ctx is None else ctx, params, traj.points)
    val, grad = _indexed(b, traj.n, np.array([i - 1]))
    return val, grad[i - 1:i + 2]


def acceleration_cost(params, traj: DiscreteTrajectory, i: int, ctx=None):
    if not 1 <= i < traj.n - 1:
        raise IndexError(i)
    b = acceleration_block(_bare(traj) if ctx is None else ctx, params, traj.points)
    val, grad = _indexed(b, traj.n, np.array([i - 1]))
    return val, grad[i - 1:i + 2]


class _Bare:
    def __init__(self, h):
        self.h = h


def _bare(traj: DiscreteTrajectory):
    return _Bare(traj.h)


def total_cost(ctx: ContextSnapshot, params: CostParams, traj: DiscreteTrajectory
               ) -> tuple[float, dict[str, float]]:
    """Objective value and the weighted sum of each term."""
    blocks = term_blocks(ctx, params, traj.points)
    breakdown = {t: getattr(params, WEIGHT_OF[t]) * blocks[t].value * ctx.h for t in TERMS}
    return float(sum(breakdown.values())), breakdown


# ---------------------------------------------------------------------------
# rendered multi-layer cost map

LAYERS = ("static", "mo", "context", "nonholonomic")


@dataclass(frozen=True, eq=False)
class CostMapGrid:
    origin: tuple[float, float]
    cell_size: float
    layers: dict  # name -> (rows, cols) array

    def to_csv(self, layer: str, header: str | None = None) -> str:
        grid = self.layers[layer]
        lines = [header] if header else []
        lines.append("x,y,cost")
        x0, y0 = self.origin
        for r in range(grid.shape[0]):
            for c in range(grid.shape[1]):
                lines.append(f"{x0 + c * self.cell_size:.6f},{y0 + r * self.cell_size:.6f},"
                             f"{grid[r, c]:.9g}")
        return "\n".join(lines) + "\n"


def render_cost_map(ctx: ContextSnapshot, params: CostParams, region: Region,
                    cell_size: float, scenario=None) -> CostMapGrid:
    """Evaluate the position-dependent costs on a grid, one array per layer.

    static: lane plus obstacle cost; mo: moving-obstacle cost against each
    agent's current (index 0) position; context: red-light positional factor
    plus, when a scenario is given, the speed deviation between the local lane
    direction and the reference-line desired velocity. The nonholonomic layer
    is identically zero: curvature and acceleration depend on the trajectory,
    not on position.
    """
    from .geometry import _grid
    origin, nodes, shape = _grid(region, cell_size)

    d, g = ctx.lane_sdf_solid.sample_many(nodes)
    static = _barrier(d, g, params.alpha_g, params.tau_b)[0] ** 2
    d, g = ctx.lane_sdf_broken.sample_many(nodes)
    static += _barrier(d, g, params.alpha_g_broken, params.tau_b)[0] ** 2
    d, g = ctx.obstacle_sdf.sample_many(nodes)
    static += _barrier(d, g, params.alpha_g, params.tau_b)[0] ** 2

    mo = np.zeros(len(nodes))
    for other in ctx.mo_predictions:
        dist = np.linalg.norm(nodes - np.asarray(other)[0], axis=1)
        mo += params.alpha_d * np.where(dist < params.tau_o, params.tau_o - dist, 0.0) ** 2

    context = np.zeros(len(nodes))
    if ctx.red_lights:
        dist, _ = red_light_query(ctx.red_lights, nodes)
        ok = (dist > 0) & (dist <= params.tau_r)
        context += np.where(ok, params.alpha_r * (dist - params.tau_r) ** 2, 0.0)
    if scenario is not None and ctx.reference is not None and scenario.lanes:
        context += _speed_deviation(scenario, ctx, nodes)

    layers = {
        "static": static.reshape(shape),
        "mo": mo.reshape(shape),
        "context": context.reshape(shape),
        "nonholonomic": np.zeros(shape),
    }
    return CostMapGrid(origin, cell_size, layers)


def _speed_deviation(scenario, ctx: ContextSnapshot, nodes: np.ndarray) -> np.ndarray:
    from .geometry import project_onto_polyline
    speed = float(ctx.desired_speed[0]) if len(ctx.desired_speed) else 0.0
    u_ref, _ = ctx.reference.direction_at(nodes)
    best = np.full(len(nodes), np.inf)
    u_lane = np.zeros_like(nodes)
    for lane in scenario.lanes:
        _, lat, k, _ = project_onto_polyline(nodes, lane.points)
        seg = lane.points[k + 1] - lane.points[k]
        seg = seg / np.linalg.norm(seg, axis=1)[:, None]
        # distance to the segment, to pick the nearest lane
        rel = nodes - lane.points[k]
        along = np.clip(np.einsum("ij,ij->i", rel, seg), 0, None)
        dist = np.linalg.norm(rel - along[:, None] * seg, axis=1)
        closer = dist < best
        best[closer] = dist[closer]
        u_lane[closer] = seg[closer]
    return speed ** 2 * np.sum((u_lane - u_ref) ** 2, axis=1)
