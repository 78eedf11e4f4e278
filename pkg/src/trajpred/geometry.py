"""Distance fields, reference lines and red-light queries over a scenario."""

from __future__ import annotations

import math
import weakref
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import shapely
from shapely.geometry import LineString

from .labels import PolicyLabel
from .scenario import Lane, PoseSample, Scenario, wrap_angle

FAR = 1.0e6  # "no obstacle" sentinel distance, meters
DEFAULT_CELL = 1.0
DEFAULT_REGION_SIZE = 40.0
DEFAULT_REGION_AHEAD = 15.0
TURN_THRESHOLD = math.radians(30.0)


class GeometryError(ValueError):
    pass


class OutsideFieldError(GeometryError):
    pass


class NoLaneError(GeometryError):
    pass


class InfeasiblePolicy(GeometryError):
    """The requested policy has no matching path at this pose (recoverable)."""


# ---------------------------------------------------------------------------
# regions and fields

@dataclass(frozen=True)
class Region:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise GeometryError(f"degenerate region {self}")

    @classmethod
    def around(cls, cx: float, cy: float, size: float) -> "Region":
        return cls(cx - size / 2, cy - size / 2, cx + size / 2, cy + size / 2)

    def covering(self, points: np.ndarray, margin: float) -> "Region":
        """Smallest region containing self and every point padded by margin."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        return Region(min(self.xmin, pts[:, 0].min() - margin),
                      min(self.ymin, pts[:, 1].min() - margin),
                      max(self.xmax, pts[:, 0].max() + margin),
                      max(self.ymax, pts[:, 1].max() + margin))

    def translated(self, dx: float, dy: float) -> "Region":
        return Region(self.xmin + dx, self.ymin + dy, self.xmax + dx, self.ymax + dy)


def context_region(pose: PoseSample, size: float = DEFAULT_REGION_SIZE,
                   ahead: float = DEFAULT_REGION_AHEAD) -> Region:
    """Axis-aligned square centered `ahead` meters in front of the pose."""
    return Region.around(pose.x + ahead * math.cos(pose.theta),
                         pose.y + ahead * math.sin(pose.theta), size)


@dataclass(frozen=True, eq=False)
class DistanceField:
    origin: tuple[float, float]
    cell_size: float
    values: np.ndarray  # (rows, cols); row index follows y, column index follows x

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 2 or min(vals.shape) < 2:
            raise GeometryError("field needs at least 2x2 nodes")
        if not self.cell_size > 0:
            raise GeometryError("cell_size must be positive")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def extent(self) -> Region:
        x0, y0 = self.origin
        return Region(x0, y0, x0 + (self.cols - 1) * self.cell_size,
                      y0 + (self.rows - 1) * self.cell_size)

    def node_xy(self) -> tuple[np.ndarray, np.ndarray]:
        x0, y0 = self.origin
        xs = x0 + self.cell_size * np.arange(self.cols)
        ys = y0 + self.cell_size * np.arange(self.rows)
        return np.meshgrid(xs, ys)

    def sample_many(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Bilinear values and analytic gradients at (M, 2) points."""
        pts = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(pts) == 0:
            return np.zeros(0), np.zeros((0, 2))
        fx = (pts[:, 0] - self.origin[0]) / self.cell_size
        fy = (pts[:, 1] - self.origin[1]) / self.cell_size
        # NaN fails every comparison, so it is caught here as well
        if not (fx.min() >= 0 and fy.min() >= 0 and fx.max() <= self.cols - 1
                and fy.max() <= self.rows - 1):
            raise OutsideFieldError("sample point outside the distance-field hull")
        c = np.minimum(np.floor(fx).astype(int), self.cols - 2)
        r = np.minimum(np.floor(fy).astype(int), self.rows - 2)
        u = fx - c
        v = fy - r
        f = self.values
        f00, f01, f10, f11 = f[r, c], f[r, c + 1], f[r + 1, c], f[r + 1, c + 1]
        val = (1 - u) * (1 - v) * f00 + u * (1 - v) * f01 + (1 - u) * v * f10 + u * v * f11
        gx = ((1 - v) * (f01 - f00) + v * (f11 - f10)) / self.cell_size
        gy = ((1 - u) * (f10 - f00) + u * (f11 - f01)) / self.cell_size
        return val, np.stack([gx, gy], axis=1)


def sample(field: DistanceField, p) -> tuple[float, np.ndarray]:
    val, grad = field.sample_many(np.asarray(p, dtype=float)[None, :])
    return float(val[0]), grad[0]


def _grid(region: Region, cell_size: float) -> tuple[tuple[float, float], np.ndarray, tuple[int, int]]:
    if not cell_size > 0:
        raise GeometryError("cell_size must be positive")
    cols = int(math.ceil((region.xmax - region.xmin) / cell_size - 1e-9)) + 1
    rows = int(math.ceil((region.ymax - region.ymin) / cell_size - 1e-9)) + 1
    xs = region.xmin + cell_size * np.arange(cols)
    ys = region.ymin + cell_size * np.arange(rows)
    gx, gy = np.meshgrid(xs, ys)
    return (region.xmin, region.ymin), np.stack([gx.ravel(), gy.ravel()], axis=1), (rows, cols)


# ---------------------------------------------------------------------------
# brute-force distances

def _segments_from_coords(coords: np.ndarray) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    if len(coords) < 2:
        return np.zeros((0, 4))
    return np.concatenate([coords[:-1], coords[1:]], axis=1)


def point_segment_distance(points: np.ndarray, segments: np.ndarray,
                           chunk: int = 4096) -> np.ndarray:
    """Exact distance from each point to the nearest of the segments."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if len(segments) == 0:
        return np.full(len(pts), FAR)
    a = segments[:, :2]
    d = segments[:, 2:] - a
    dd = np.einsum("ij,ij->i", d, d)
    dd = np.where(dd > 0, dd, 1.0)
    out = np.empty(len(pts))
    for k in range(0, len(pts), chunk):
        p = pts[k:k + chunk]
        rx = p[:, None, 0] - a[None, :, 0]
        ry = p[:, None, 1] - a[None, :, 1]
        t = np.clip((rx * d[None, :, 0] + ry * d[None, :, 1]) / dd[None, :], 0.0, 1.0)
        ex = rx - t * d[None, :, 0]
        ey = ry - t * d[None, :, 1]
        out[k:k + chunk] = np.sqrt(np.min(ex * ex + ey * ey, axis=1))
    return out


def _filter_segments(segments: np.ndarray, region: Region, margin: float) -> np.ndarray:
    if len(segments) == 0:
        return segments
    lo_x = np.minimum(segments[:, 0], segments[:, 2])
    hi_x = np.maximum(segments[:, 0], segments[:, 2])
    lo_y = np.minimum(segments[:, 1], segments[:, 3])
    hi_y = np.maximum(segments[:, 1], segments[:, 3])
    keep = ((hi_x >= region.xmin - margin) & (lo_x <= region.xmax + margin)
            & (hi_y >= region.ymin - margin) & (lo_y <= region.ymax + margin))
    return segments[keep]


def polyline_distance(points: np.ndarray, line: np.ndarray) -> np.ndarray:
    return point_segment_distance(points, _segments_from_coords(line))


def inside_corridors(scenario: Scenario, points: np.ndarray) -> np.ndarray:
    """Exact test: a point is drivable iff it lies within width/2 of a centerline (edges included)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    inside = np.zeros(len(pts), dtype=bool)
    for lane in scenario.lanes:
        inside |= polyline_distance(pts, lane.points) <= lane.width / 2
    return inside


def points_in_polygon(points: np.ndarray, polygon: np.ndarray) -> np.ndarray:
    """Even-odd ray casting."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    x, y = pts[:, 0:1], pts[:, 1:2]
    px, py = polygon[:, 0][None, :], polygon[:, 1][None, :]
    qx, qy = np.roll(polygon[:, 0], -1)[None, :], np.roll(polygon[:, 1], -1)[None, :]
    straddle = (py > y) != (qy > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = px + (y - py) * (qx - px) / (qy - py)
    hits = straddle & (x < xcross)
    return (np.count_nonzero(hits, axis=1) % 2) == 1


# ---------------------------------------------------------------------------
# road geometry (cached per scenario object)

@dataclass(frozen=True)
class RoadGeometry:
    union_segments: np.ndarray     # edges of the union of all lane corridors
    interior_solid: np.ndarray     # solid lane lines strictly inside the union
    interior_broken: np.ndarray    # broken lane lines strictly inside the union
    obstacle_segments: np.ndarray
    obstacle_polygons: tuple[np.ndarray, ...]


_ROAD_CACHE: dict[int, RoadGeometry] = {}


def _ring_segments(geom) -> list[np.ndarray]:
    out = []
    polys = getattr(geom, "geoms", [geom])
    for poly in polys:
        if poly.is_empty:
            continue
        for ring in [poly.exterior, *poly.interiors]:
            out.append(_segments_from_coords(np.asarray(ring.coords)))
    return out


def _line_segments(geom) -> list[np.ndarray]:
    if geom.is_empty:
        return []
    if hasattr(geom, "geoms"):
        out = []
        for g in geom.geoms:
            out.extend(_line_segments(g))
        return out
    if geom.geom_type in ("LineString", "LinearRing"):
        return [_segments_from_coords(np.asarray(geom.coords))]
    return []


def _stack(parts: list[np.ndarray]) -> np.ndarray:
    parts = [p for p in parts if len(p)]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 4))


def road_geometry(scenario: Scenario) -> RoadGeometry:
    key = id(scenario)
    cached = _ROAD_CACHE.get(key)
    if cached is not None:
        return cached
    corridors = [LineString(ln.points).buffer(ln.width / 2, quad_segs=16) for ln in scenario.lanes]
    union = shapely.unary_union(corridors) if corridors else shapely.Polygon()
    shrunk = union.buffer(-0.05) if corridors else union
    solid, broken = [], []
    for ln in scenario.lanes:
        line = LineString(ln.points)
        for side, kind in ((1.0, ln.left_boundary_kind), (-1.0, ln.right_boundary_kind)):
            edge = line.offset_curve(side * ln.width / 2, join_style="mitre", mitre_limit=3.0)
            inner = edge.intersection(shrunk)
            (solid if kind == "solid" else broken).extend(_line_segments(inner))
    polys = tuple(o.points for o in scenario.obstacles)
    geom = RoadGeometry(
        union_segments=_stack(_ring_segments(union)) if corridors else np.zeros((0, 4)),
        interior_solid=_stack(solid),
        interior_broken=_stack(broken),
        obstacle_segments=_stack([_segments_from_coords(np.vstack([p, p[:1]])) for p in polys]),
        obstacle_polygons=polys,
    )
    _ROAD_CACHE[key] = geom
    weakref.finalize(scenario, _ROAD_CACHE.pop, key, None)
    return geom


# ---------------------------------------------------------------------------
# field builders

def lane_distance_values(scenario: Scenario, points: np.ndarray, boundary: str = "solid",
                         region: Region | None = None, margin: float = 15.0) -> np.ndarray:
    """Signed lane-boundary distance evaluated exactly at arbitrary points."""
    if not scenario.lanes:
        raise GeometryError("scenario has no lanes")
    geom = road_geometry(scenario)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)

    def segs(s):
        return s if region is None else _filter_segments(s, region, margin)

    inside = inside_corridors(scenario, pts)
    if boundary == "solid":
        d_edge = point_segment_distance(pts, segs(geom.union_segments))
        d_line = point_segment_distance(pts, segs(geom.interior_solid))
        return np.where(inside, np.minimum(d_edge, d_line), -d_edge)
    if boundary == "broken":
        return point_segment_distance(pts, segs(geom.interior_broken))
    raise ValueError(f"unknown boundary kind {boundary!r}")


def build_lane_sdf(scenario: Scenario, region: Region, cell_size: float = DEFAULT_CELL,
                   boundary: str = "solid") -> DistanceField:
    """Bi-directional signed distance to lane boundaries on a regular grid.

    solid: positive inside the drivable corridors (distance to the nearest
    corridor edge or interior solid line), negative outside.
    broken: unsigned distance to interior broken lane lines (FAR if none).
    """
    origin, nodes, shape = _grid(region, cell_size)
    vals = lane_distance_values(scenario, nodes, boundary, region)
    return DistanceField(origin, cell_size, vals.reshape(shape))


def obstacle_distance_values(scenario: Scenario, points: np.ndarray) -> np.ndarray:
    geom = road_geometry(scenario)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not geom.obstacle_polygons:
        return np.full(len(pts), FAR)
    d = point_segment_distance(pts, geom.obstacle_segments)
    inside = np.zeros(len(pts), dtype=bool)
    for poly in geom.obstacle_polygons:
        inside |= points_in_polygon(pts, poly)
    return np.where(inside, -d, d)


def build_obstacle_sdf(scenario: Scenario, region: Region,
                       cell_size: float = DEFAULT_CELL) -> DistanceField:
    """Signed distance to static obstacles: positive outside, negative inside."""
    origin, nodes, shape = _grid(region, cell_size)
    return DistanceField(origin, cell_size, obstacle_distance_values(scenario, nodes).reshape(shape))


# ---------------------------------------------------------------------------
# polylines

def _arc_lengths(points: np.ndarray) -> np.ndarray:
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(points, axis=0), axis=1))])


def project_onto_polyline(points: np.ndarray, line: np.ndarray, extend: bool = False):
    """Nearest-point projection of (M, 2) points onto a polyline.

    Returns arc length s, signed lateral offset (left positive), segment index
    and the clamping flag per point. With extend=True the first and last
    segments are prolonged so points before/after the line get s < 0 or s > L.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    a = line[:-1]
    d = line[1:] - line[:-1]
    seg_len = np.linalg.norm(d, axis=1)
    tang = d / seg_len[:, None]
    s0 = np.concatenate([[0.0], np.cumsum(seg_len)])[:-1]
    rx = pts[:, None, 0] - a[None, :, 0]
    ry = pts[:, None, 1] - a[None, :, 1]
    along = rx * tang[None, :, 0] + ry * tang[None, :, 1]
    lo = np.zeros_like(along)
    hi = np.broadcast_to(seg_len[None, :], along.shape).copy()
    if extend:
        lo[:, 0] = -np.inf
        hi[:, -1] = np.inf
    t = np.clip(along, lo, hi)
    ex = rx - t * tang[None, :, 0]
    ey = ry - t * tang[None, :, 1]
    dist2 = ex * ex + ey * ey
    k = np.argmin(dist2, axis=1)
    idx = np.arange(len(pts))
    tk = t[idx, k]
    s = s0[k] + tk
    lateral = rx[idx, k] * -tang[k, 1] + ry[idx, k] * tang[k, 0]
    clamped = (along[idx, k] != tk)
    return s, lateral, k, clamped


def _segment_headings(points: np.ndarray) -> np.ndarray:
    d = np.diff(points, axis=0)
    return np.unwrap(np.arctan2(d[:, 1], d[:, 0]))


def heading_change(points: np.ndarray) -> float:
    h = _segment_headings(points)
    return float(h[-1] - h[0]) if len(h) else 0.0


def _dedupe(points: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    keep = [0]
    for k in range(1, len(points)):
        if np.linalg.norm(points[k] - points[keep[-1]]) > tol:
            keep.append(k)
    return points[keep]


def _cut(points: np.ndarray, s_from: float, s_to: float | None = None) -> np.ndarray:
    """Sub-polyline between two arc lengths (inclusive end points)."""
    s = _arc_lengths(points)
    s_to = s[-1] if s_to is None else min(s_to, s[-1])
    inner = points[(s > s_from) & (s < s_to)]
    start = np.array([np.interp(s_from, s, points[:, 0]), np.interp(s_from, s, points[:, 1])])
    end = np.array([np.interp(s_to, s, points[:, 0]), np.interp(s_to, s, points[:, 1])])
    return _dedupe(np.vstack([start, inner, end]))


# ---------------------------------------------------------------------------
# reference lines

@dataclass(frozen=True, eq=False)
class ReferenceLine:
    points: np.ndarray
    policy: PolicyLabel
    speed_limits: np.ndarray  # per vertex, m/s

    def __post_init__(self):
        pts = _dedupe(np.asarray(self.points, dtype=float))
        if len(pts) < 2:
            raise GeometryError("reference line needs >= 2 distinct points")
        object.__setattr__(self, "points", pts)
        lim = np.asarray(self.speed_limits, dtype=float)
        if lim.shape != (len(pts),):
            lim = np.full(len(pts), float(np.min(lim)) if lim.size else np.inf)
        object.__setattr__(self, "speed_limits", lim)
        s = _arc_lengths(pts)
        seg = _segment_headings(pts)
        vert = np.concatenate([[seg[0]], 0.5 * (seg[:-1] + seg[1:]), [seg[-1]]])
        object.__setattr__(self, "_s", s)
        object.__setattr__(self, "_vertex_heading", vert)

    @property
    def s(self) -> np.ndarray:
        return self._s

    @property
    def length(self) -> float:
        return float(self._s[-1])

    def point_at(self, s) -> np.ndarray:
        """Point at arc length s; beyond either end the end segment is prolonged."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        pts, ss = self.points, self._s
        out = np.stack([np.interp(s, ss, pts[:, 0]), np.interp(s, ss, pts[:, 1])], axis=1)
        for mask, (i0, i1), base in ((s < 0, (0, 1), 0.0), (s > ss[-1], (-2, -1), ss[-1])):
            if np.any(mask):
                t = pts[i1] - pts[i0]
                t = t / np.linalg.norm(t)
                anchor = pts[0] if base == 0.0 else pts[-1]
                out[mask] = anchor + (s[mask] - base)[:, None] * t
        return out

    def speed_limit_at(self, s) -> np.ndarray:
        return np.interp(np.atleast_1d(s), self._s, self.speed_limits)

    def project(self, points: np.ndarray):
        """Arc length of each point's projection and d(s)/d(point)."""
        s, _, k, clamped = project_onto_polyline(points, self.points, extend=True)
        d = self.points[k + 1] - self.points[k]
        tang = d / np.linalg.norm(d, axis=1)[:, None]
        ds_dp = np.where(clamped[:, None], 0.0, tang)
        return s, ds_dp

    def heading_at(self, s) -> tuple[np.ndarray, np.ndarray]:
        """Interpolated heading phi(s) and its slope dphi/ds."""
        s = np.atleast_1d(np.asarray(s, dtype=float))
        ss, vh = self._s, self._vertex_heading
        phi = np.interp(s, ss, vh)
        k = np.clip(np.searchsorted(ss, s, side="right") - 1, 0, len(ss) - 2)
        slope = (vh[k + 1] - vh[k]) / (ss[k + 1] - ss[k])
        slope = np.where((s < 0) | (s > ss[-1]), 0.0, slope)
        return phi, slope

    def direction_at(self, points: np.ndarray):
        """Unit desired direction at each point's projection and its Jacobian (M, 2, 2)."""
        s, ds_dp = self.project(points)
        phi, slope = self.heading_at(s)
        u = np.stack([np.cos(phi), np.sin(phi)], axis=1)
        du_dphi = np.stack([-np.sin(phi), np.cos(phi)], axis=1)
        jac = du_dphi[:, :, None] * (slope[:, None] * ds_dp)[:, None, :]
        return u, jac


@dataclass(frozen=True)
class LaneMatch:
    lane: Lane
    s: float
    distance: float
    heading_diff: float


def lane_matches(scenario: Scenario, pose: PoseSample) -> list[LaneMatch]:
    """Lanes within 2x width of the pose, nearest first (heading breaks ties)."""
    p = np.array([[pose.x, pose.y]])
    out = []
    for lane in scenario.lanes:
        q = lane.points
        s, _, k, _ = project_onto_polyline(p, q)
        seg = q[k[0] + 1] - q[k[0]]
        # distance to the clamped projection point, not just the lateral offset
        proj = q[k[0]] + (s[0] - _arc_lengths(q)[k[0]]) * seg / np.linalg.norm(seg)
        dist = float(np.linalg.norm(p[0] - proj))
        if dist > 2.0 * lane.width:
            continue
        hd = abs(wrap_angle(math.atan2(seg[1], seg[0]) - pose.theta))
        out.append(LaneMatch(lane, float(s[0]), dist, hd))
    out.sort(key=lambda m: (round(m.distance, 6), m.heading_diff))
    return out


def match_lane(scenario: Scenario, pose: PoseSample) -> LaneMatch:
    matches = lane_matches(scenario, pose)
    if not matches:
        raise NoLaneError(f"no lane within range of ({pose.x:.2f}, {pose.y:.2f})")
    return matches[0]


def _walk(scenario: Scenario, lane: Lane, s_start: float, length: float,
          turn_sign: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Follow successors from (lane, s_start) for `length` meters of arc.

    turn_sign 0 picks the straightest successor; +1/-1 prefers the successor
    turning that way by more than the turn threshold. Returns the points,
    per-point speed limits and the signed heading change along the path.
    """
    pieces, limits = [], []
    piece = _cut(lane.points, s_start)
    pieces.append(piece)
    limits.append(np.full(len(piece), lane.speed_limit))
    remaining = length - (lane.length - s_start)
    current = lane
    visited = {lane.id}
    while remaining > 0 and current.successors:
        succs = [scenario.lane(sid) for sid in current.successors]
        changes = [heading_change(sc.points) for sc in succs]
        pick = None
        if turn_sign:
            turning = [(turn_sign * c, sc) for c, sc in zip(changes, succs)
                       if turn_sign * c > TURN_THRESHOLD]
            if turning:
                pick = max(turning, key=lambda x: x[0])[1]
        if pick is None:
            pick = min(zip(changes, succs), key=lambda x: abs(x[0]))[1]
        if pick.id in visited:
            break
        visited.add(pick.id)
        pieces.append(pick.points)
        limits.append(np.full(len(pick.points), pick.speed_limit))
        remaining -= pick.length
        current = pick
    pts = np.vstack(pieces)
    lim = np.concatenate(limits)
    keep = [0]
    for k in range(1, len(pts)):
        if np.linalg.norm(pts[k] - pts[keep[-1]]) > 1e-6:
            keep.append(k)
    pts, lim = pts[keep], lim[keep]
    s = _arc_lengths(pts)
    cut = min(length, s[-1])
    pts_cut = _cut(pts, 0.0, cut)
    lim_cut = np.interp(_arc_lengths(pts_cut), s, lim)
    return pts_cut, lim_cut, heading_change(pts_cut) if len(pts_cut) > 2 else 0.0


def _adjacent_lane(scenario: Scenario, match: LaneMatch, side: int) -> tuple[Lane, float] | None:
    lane = match.lane
    q = lane.points
    s = _arc_lengths(q)
    k = min(int(np.searchsorted(s, match.s, side="right")) - 1, len(q) - 2)
    t = (q[k + 1] - q[k]) / np.linalg.norm(q[k + 1] - q[k])
    base = q[k] + (match.s - s[k]) * t
    normal = np.array([-t[1], t[0]]) * side
    heading = math.atan2(t[1], t[0])
    best = None
    for other in scenario.lanes:
        if other.id == lane.id:
            continue
        target = base + normal * 0.5 * (lane.width + other.width)
        so, lat, ko, _ = project_onto_polyline(target[None, :], other.points)
        if abs(lat[0]) > 0.5 * other.width:
            continue
        seg = other.points[ko[0] + 1] - other.points[ko[0]]
        if abs(wrap_angle(math.atan2(seg[1], seg[0]) - heading)) > TURN_THRESHOLD:
            continue
        if best is None or abs(lat[0]) < best[2]:
            best = (other, float(so[0]), abs(float(lat[0])))
    return None if best is None else best[:2]


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def extract_reference_line(scenario: Scenario, pose: PoseSample, policy: PolicyLabel,
                           horizon: float, lane_change_length: float | None = None) -> ReferenceLine:
    """Lane-graph polyline consistent with `policy`, starting at the pose's projection.

    Raises NoLaneError when no lane is near the pose and InfeasiblePolicy when
    the policy has no matching path here.
    """
    policy = PolicyLabel(policy)
    matches = lane_matches(scenario, pose)
    if not matches:
        raise NoLaneError(f"no lane within range of ({pose.x:.2f}, {pose.y:.2f})")
    # candidates tied with the nearest lane: every lane whose corridor holds the pose
    best = matches[0]
    tied = [m for m in matches if m.distance <= max(best.distance, 0.0) + 0.5 * m.lane.width
            and m.heading_diff < math.pi / 2] or [best]

    if policy in (PolicyLabel.FORWARD, PolicyLabel.YIELD):
        pts, lim, _ = _walk(scenario, best.lane, best.s, horizon, 0)
        return ReferenceLine(pts, policy, lim)

    if policy in (PolicyLabel.TURN_LEFT, PolicyLabel.TURN_RIGHT):
        sign = 1 if policy == PolicyLabel.TURN_LEFT else -1
        for m in tied:
            pts, lim, change = _walk(scenario, m.lane, m.s, horizon, sign)
            if sign * change > TURN_THRESHOLD:
                if m is not best:
                    # start at the nearest centerline projection, then join the branch
                    start = _walk(scenario, best.lane, best.s, 1e-3, 0)[0][0]
                    pts = np.vstack([start, pts])
                    lim = np.concatenate([[lim[0]], lim])
                return ReferenceLine(pts, policy, lim)
        raise InfeasiblePolicy(f"no {policy.slug} path at ({pose.x:.2f}, {pose.y:.2f})")

    side = 1 if policy == PolicyLabel.LANE_CHANGE_LEFT else -1
    adj = _adjacent_lane(scenario, best, side)
    if adj is None:
        raise InfeasiblePolicy(f"no adjacent lane for {policy.slug}")
    other, s_other = adj
    cur_pts, cur_lim, _ = _walk(scenario, best.lane, best.s, horizon, 0)
    adj_pts, adj_lim, _ = _walk(scenario, other, s_other, horizon, 0)
    length = lane_change_length or max(20.0, 3.0 * pose.v)
    n = max(int(math.ceil(horizon / 0.5)), 4)
    s = np.linspace(0.0, horizon, n + 1)
    cur = ReferenceLine(cur_pts, policy, cur_lim)
    tgt = ReferenceLine(adj_pts, policy, adj_lim)
    w = _smoothstep(s / length)[:, None]
    pts = (1 - w) * cur.point_at(s) + w * tgt.point_at(s)
    lim = np.minimum(cur.speed_limit_at(s), tgt.speed_limit_at(s))
    return ReferenceLine(pts, policy, lim)


# ---------------------------------------------------------------------------
# traffic lights

@dataclass(frozen=True)
class RedLightHit:
    distance: float          # perpendicular distance to the stop line (> 0 before it)
    direction: np.ndarray    # unit force direction, opposing travel
    normal: np.ndarray       # unit normal of the stop line pointing along the approach


def _light_frame(light) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    a = np.array(light.stop_line[:2])
    b = np.array(light.stop_line[2:])
    d = b - a
    n = np.array([-d[1], d[0]]) / np.linalg.norm(d)
    if n @ np.array(light.approach) < 0:
        n = -n
    return a, d, n


def red_light_query(lights: Sequence, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized distance to the nearest applicable stop line among `lights`.

    Returns (distance, normal) with distance = +inf where no light applies.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    best = np.full(len(pts), np.inf)
    normal = np.zeros((len(pts), 2))
    for light in lights:
        a, d, n = _light_frame(light)
        lam = ((pts - a) @ d) / (d @ d)
        dist = (a - pts) @ n
        ok = (lam >= 0.0) & (lam <= 1.0) & (dist > 0.0) & (dist < best)
        best[ok] = dist[ok]
        normal[ok] = n
    return best, normal


def red_light_distance(scenario: Scenario, p, t: float) -> RedLightHit | None:
    """Distance to the nearest red stop line ahead of p at time t, or None."""
    lights = [lt for lt in scenario.lights if lt.is_red(t)]
    dist, normal = red_light_query(lights, np.asarray(p, dtype=float)[None, :])
    if not np.isfinite(dist[0]):
        return None
    light = None
    for lt in lights:
        a, _, n = _light_frame(lt)
        if np.allclose(n, normal[0]) and abs((a - np.asarray(p)) @ n - dist[0]) < 1e-9:
            light = lt
            break
    return RedLightHit(float(dist[0]), -np.array(light.approach), normal[0].copy())


def _segments_intersect(p, q, a, b) -> float | None:
    """Parameter along p->q where it crosses segment a-b, if it does."""
    r = q - p
    s = b - a
    den = r[0] * s[1] - r[1] * s[0]
    if abs(den) < 1e-12:
        return None
    w = a - p
    t = (w[0] * s[1] - w[1] * s[0]) / den
    u = (w[0] * r[1] - w[1] * r[0]) / den
    if 0.0 <= t <= 1.0 and 0.0 <= u <= 1.0:
        return t
    return None


def red_light_crossings(scenario: Scenario, points: np.ndarray, t0: float, h: float) -> list[float]:
    """Times at which a polyline sampled at t0 + i*h crosses a stop line while it is red."""
    out = []
    for light in scenario.lights:
        a = np.array(light.stop_line[:2])
        b = np.array(light.stop_line[2:])
        appr = np.array(light.approach)
        for i in range(len(points) - 1):
            p, q = points[i], points[i + 1]
            if (q - p) @ appr <= 0:
                continue
            t = _segments_intersect(p, q, a, b)
            if t is None or t == 0.0:
                continue  # a point on the line belongs to the segment that reaches it
            tc = t0 + (i + t) * h
            if light.is_red(tc):
                out.append(tc)
    return sorted(out)
