"""Domain catalog and conforming triangulations.

Domains are described by a level-set function ``phi`` (negative inside).
Unions of balls and tubes are blended with a polynomial smooth minimum so
that junction corners come out rounded; punctures are subtracted sharply.
Boundary loops are extracted by marching squares and projected back onto
``phi = 0``.  Symmetric domains are meshed on a fundamental wedge which is
then reflected or rotated, so the vertex set is exactly invariant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import triangle as _triangle
from scipy.spatial import ConvexHull, cKDTree
from shapely.geometry import LineString, Polygon
from shapely.ops import polygonize, unary_union
from skimage.measure import find_contours

LevelSet = Callable[[np.ndarray], np.ndarray]

KINDS = ("disk", "annulus", "disk_with_holes", "dumbbell", "hub")


class GeometryError(ValueError):
    """Invalid construction parameters or a mesh that fails validation."""


# ---------------------------------------------------------------------------
# level-set primitives


def smooth_min(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    """Polynomial smooth minimum; equals ``min(a, b)`` once ``|a-b| >= k``."""
    if k <= 0:
        return np.minimum(a, b)
    hh = np.clip(k - np.abs(a - b), 0.0, None) / k
    return np.minimum(a, b) - hh * hh * k / 4.0


def sdf_disk(p: np.ndarray, c, r: float) -> np.ndarray:
    return np.hypot(p[:, 0] - c[0], p[:, 1] - c[1]) - r


def sdf_polyline(p: np.ndarray, pts: np.ndarray, w: float) -> np.ndarray:
    """Signed distance to a tube of half-width ``w`` around a polyline."""
    pts = np.asarray(pts, dtype=float)
    best = np.full(len(p), np.inf)
    for a, b in zip(pts[:-1], pts[1:]):
        ab = b - a
        t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
        d = np.hypot(*(p - (a + t[:, None] * ab)).T)
        best = np.minimum(best, d)
    return best - w


def _handle_path(center, r, direction, span, radius, n_arc=96):
    """Centre line of a lateral handle: out radially, around an arc, back in."""
    a0, a1 = direction - span, direction + span
    start = np.array(center) + (r - 0.5 * (radius - r)) * np.array([math.cos(a0), math.sin(a0)])
    end = np.array(center) + (r - 0.5 * (radius - r)) * np.array([math.cos(a1), math.sin(a1)])
    ang = np.linspace(a0, a1, n_arc)
    arc = np.array(center) + radius * np.c_[np.cos(ang), np.sin(ang)]
    return np.vstack([start, arc, end])


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class CurveLoop:
    """Closed polyline; CCW for the outer loop, CW for holes."""

    points: np.ndarray

    @property
    def signed_area(self) -> float:
        x, y = self.points[:, 0], self.points[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    @property
    def length(self) -> float:
        d = np.diff(np.vstack([self.points, self.points[:1]]), axis=0)
        return float(np.hypot(*d.T).sum())

    def polygon(self) -> Polygon:
        return Polygon(self.points)


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    params: dict
    outer: CurveLoop
    holes: tuple
    label: str = ""
    symmetry: Optional[tuple] = None
    refine_spots: tuple = ()
    min_feature: float = math.inf

    @property
    def k(self) -> int:
        return len(self.holes)

    @property
    def phi(self) -> LevelSet:
        return _level_set(self.kind, self.params)

    @property
    def diameter(self) -> float:
        p = self.outer.points
        if len(p) > 3:
            p = p[ConvexHull(p).vertices]
        d = p[:, None, :] - p[None, :, :]
        return float(np.sqrt(np.max(np.sum(d * d, axis=-1))))

    @property
    def area(self) -> float:
        return self.outer.signed_area + sum(hl.signed_area for hl in self.holes)

    def contains(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        return self.phi(pts) < 0

    def to_json(self) -> str:
        return json.dumps({"kind": self.kind, "params": self.params, "holes": self.k,
                           "label": self.label}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DomainSpec":
        d = json.loads(text)
        spec = build_domain(d["kind"], d["params"])
        if "holes" in d and int(d["holes"]) != spec.k:
            raise GeometryError(f"hole count mismatch: file says {d['holes']}, built {spec.k}")
        return spec


# ---------------------------------------------------------------------------
# catalog


def _punctures(params) -> list:
    return [tuple(map(float, q)) for q in params.get("punctures", [])]


def _hub_centers(m, side, angle0=math.pi / 2):
    rc = side / (2.0 * math.sin(math.pi / m))
    th = angle0 + 2.0 * math.pi * np.arange(m) / m
    return rc * np.c_[np.cos(th), np.sin(th)], th


def _dumbbell_centers(m, sep):
    xs = (np.arange(m) - (m - 1) / 2.0) * sep
    return np.c_[xs, np.zeros(m)]


def _handle_specs(center, r, direction, count, eps, gap, span_deg=50.0):
    out = []
    for j in range(count):
        span = math.radians(span_deg + 25.0 * j)
        radius = r + gap * (1 + j)
        out.append(_handle_path(center, r, direction, span, radius))
    return out


def _level_set(kind: str, params: dict) -> LevelSet:
    P = params
    punct = _punctures(P)

    if kind == "disk":
        c, R = P.get("center", (0.0, 0.0)), P.get("radius", 1.0)

        def base(p):
            return sdf_disk(p, c, R)

    elif kind == "annulus":
        c = P.get("center", (0.0, 0.0))
        R, r = P.get("radius", 1.0), P["inner_radius"]

        def base(p):
            return np.maximum(sdf_disk(p, c, R), -sdf_disk(p, c, r))

    elif kind == "disk_with_holes":
        R = P.get("radius", 1.0)
        holes = [tuple(map(float, h)) for h in P.get("holes", [])]

        def base(p):
            v = sdf_disk(p, (0.0, 0.0), R)
            for hx, hy, hr in holes:
                v = np.maximum(v, -sdf_disk(p, (hx, hy), hr))
            return v

    elif kind == "dumbbell":
        m, r, eps = int(P["m"]), P.get("radius", 1.0), P["eps"]
        centers = _dumbbell_centers(m, P.get("sep", 2.6 * r))
        hw = P.get("handle_width", max(eps, 0.25 * r))
        gap = P.get("handle_gap", 2.0 * hw)
        handles = _handle_specs(centers[0], r, math.pi, int(P.get("handles", 0)), hw, gap,
                                P.get("handle_span", 20.0))
        k = eps / 2.0

        def base(p):
            v = sdf_disk(p, centers[0], r)
            for c in centers[1:]:
                v = smooth_min(v, sdf_disk(p, c, r), k)
            if m > 1:
                v = smooth_min(v, sdf_polyline(p, centers[[0, -1]], eps), k)
            for path in handles:
                v = smooth_min(v, sdf_polyline(p, path, hw), k)
            return v

    elif kind == "hub":
        m, r, eps = int(P["m"]), P.get("radius", 0.2), P["eps"]
        centers, th = _hub_centers(m, P.get("side", 1.0))
        gap = P.get("handle_gap", max(4.0 * eps, 0.5 * r))
        hw = P.get("handle_width", eps)
        handles = []
        for c, t in zip(centers, th):
            handles += _handle_specs(c, r, t, int(P.get("handles", 0)), hw, gap, P.get("handle_span", 50.0))
        k = eps / 2.0

        def base(p):
            v = sdf_disk(p, centers[0], r)
            for c in centers[1:]:
                v = smooth_min(v, sdf_disk(p, c, r), k)
            for c in centers:
                v = smooth_min(v, sdf_polyline(p, np.vstack([[0.0, 0.0], c]), eps), k)
            for path in handles:
                v = smooth_min(v, sdf_polyline(p, path, hw), k)
            return v

    else:
        raise GeometryError(f"unknown domain kind {kind!r}; expected one of {KINDS}")

    if not punct:
        return base

    def phi(p):
        v = base(p)
        for x, y, d in punct:
            v = np.maximum(v, -sdf_disk(p, (x, y), d))
        return v

    return phi


def _validate(kind: str, P: dict) -> tuple:
    """Check construction parameters; return (expected holes, symmetry, min feature)."""
    def positive(name, default=None):
        v = P.get(name, default)
        if v is None or not v > 0:
            raise GeometryError(f"{name} must be positive, got {v!r}")
        return float(v)

    punct = _punctures(P)
    holes = 0
    feature = math.inf
    if kind == "disk":
        positive("radius", 1.0)
        sym = ("reflect",)
    elif kind == "annulus":
        R, r = positive("radius", 1.0), positive("inner_radius")
        if r >= R:
            raise GeometryError("inner radius must be smaller than outer radius")
        holes, sym, feature = 1, ("reflect",), R - r
    elif kind == "disk_with_holes":
        R = positive("radius", 1.0)
        hs = [tuple(map(float, h)) for h in P.get("holes", [])]
        for i, (x, y, r) in enumerate(hs):
            if r <= 0:
                raise GeometryError("hole radius must be positive")
            if math.hypot(x, y) + r >= R:
                raise GeometryError(f"hole {i} crosses the outer boundary")
            feature = min(feature, R - math.hypot(x, y) - r)
            for x2, y2, r2 in hs[:i]:
                if math.hypot(x - x2, y - y2) <= r + r2:
                    raise GeometryError("holes overlap")
                feature = min(feature, math.hypot(x - x2, y - y2) - r - r2)
        holes = len(hs)
        sym = ("reflect",) if all(abs(y) < 1e-14 for _, y, _ in hs) else None
    elif kind == "dumbbell":
        m = int(P.get("m", 0))
        if m < 1:
            raise GeometryError("dumbbell needs m >= 1 balls")
        r, eps = positive("radius", 1.0), positive("eps")
        sep = P.get("sep", 2.6 * r)
        if m > 1 and sep <= 2 * r:
            raise GeometryError("dumbbell balls overlap (sep <= 2 radius)")
        if eps >= r:
            raise GeometryError("neck half-width must be smaller than the ball radius")
        holes = int(P.get("handles", 0))
        sym = ("reflect",)
        feature = 2 * eps
    elif kind == "hub":
        m = int(P.get("m", 0))
        if m < 3:
            raise GeometryError("hub needs m >= 3")
        r, eps = positive("radius", 0.2), positive("eps")
        side = P.get("side", 1.0)
        if r >= side / 4:
            raise GeometryError("hub ball radius must be below side/4")
        if eps >= r:
            raise GeometryError("tube half-width must be smaller than the ball radius")
        holes = m * int(P.get("handles", 0))
        sym = ("rotate", m)
        feature = 2 * eps
    else:
        raise GeometryError(f"unknown domain kind {kind!r}")
    if punct:
        sym = None
        holes += len(punct)
        phi0 = _level_set(kind, {k: v for k, v in P.items() if k != "punctures"})
        for i, (x, y, d) in enumerate(punct):
            if d <= 0:
                raise GeometryError("puncture radius must be positive")
            ang = np.linspace(0, 2 * np.pi, 128, endpoint=False)
            ring = np.c_[x + 1.5 * d * np.cos(ang), y + 1.5 * d * np.sin(ang)]
            if np.any(phi0(ring) >= 0):
                raise GeometryError(f"puncture {i} intersects the boundary")
            for x2, y2, d2 in punct[:i]:
                if math.hypot(x - x2, y - y2) <= 1.5 * (d + d2):
                    raise GeometryError("punctures overlap")
        feature = min(feature, min(d for _, _, d in punct))
    return holes, sym, feature


def project_to_boundary(phi: LevelSet, pts: np.ndarray, iters: int = 8, scale: float = 1.0) -> np.ndarray:
    """Newton-project points onto ``phi = 0`` along the level-set gradient."""
    p = np.array(pts, dtype=float)
    e = 1e-7 * scale
    ex, ey = np.array([e, 0.0]), np.array([0.0, e])
    for _ in range(iters):
        f = phi(p)
        g = np.c_[(phi(p + ex) - phi(p - ex)) / (2 * e), (phi(p + ey) - phi(p - ey)) / (2 * e)]
        g2 = np.maximum((g * g).sum(axis=1), 1e-30)
        p = p - (f / g2)[:, None] * g
        if np.max(np.abs(f)) < 1e-13 * scale:
            break
    return p


def _extract_loops(phi: LevelSet, bbox, pitch: float) -> list:
    (x0, y0), (x1, y1) = bbox
    nx = int(math.ceil((x1 - x0) / pitch)) + 1
    ny = int(math.ceil((y1 - y0) / pitch)) + 1
    xs = np.linspace(x0, x1, nx)
    ys = np.linspace(y0, y1, ny)
    X, Y = np.meshgrid(xs, ys)
    F = phi(np.c_[X.ravel(), Y.ravel()]).reshape(ny, nx)
    loops = []
    scale = max(x1 - x0, y1 - y0)
    for c in find_contours(F, 0.0):
        if len(c) < 8:
            continue
        pts = np.c_[np.interp(c[:, 1], np.arange(nx), xs), np.interp(c[:, 0], np.arange(ny), ys)]
        if np.hypot(*(pts[0] - pts[-1])) > 1e-9 * scale:
            raise GeometryError("open boundary contour; enlarge the sampling box")
        pts = project_to_boundary(phi, pts[:-1], scale=scale)
        keep = np.r_[True, np.hypot(*np.diff(pts, axis=0).T) > 1e-9 * scale]
        loops.append(pts[keep])
    return loops


def _bbox(kind: str, P: dict):
    if kind in ("disk", "annulus", "disk_with_holes"):
        c = np.array(P.get("center", (0.0, 0.0)), dtype=float)
        R = P.get("radius", 1.0)
        return (c - R, c + R)
    if kind == "dumbbell":
        m, r = int(P["m"]), P.get("radius", 1.0)
        sep = P.get("sep", 2.6 * r)
        hw = P.get("handle_width", max(P["eps"], 0.25 * r))
        gap = P.get("handle_gap", 2.0 * hw)
        ext = r + (gap * int(P.get("handles", 0)) + hw if P.get("handles") else 0.0)
        half = (m - 1) / 2.0 * sep
        return (np.array([-half - ext, -ext]), np.array([half + r, ext]))
    if kind == "hub":
        m, r = int(P["m"]), P.get("radius", 0.2)
        rc = P.get("side", 1.0) / (2.0 * math.sin(math.pi / m))
        gap = P.get("handle_gap", max(4.0 * P["eps"], 0.5 * r))
        ext = rc + r + (gap * int(P.get("handles", 0)) + P.get("handle_width", P["eps"]) if P.get("handles") else 0.0)
        return (np.array([-ext, -ext]), np.array([ext, ext]))
    raise GeometryError(f"unknown domain kind {kind!r}")


def build_domain(kind: str, params: Optional[dict] = None, **kw) -> DomainSpec:
    """Construct a catalog domain.

    Parameters
    ----------
    kind : str
        One of ``disk``, ``annulus``, ``disk_with_holes``, ``dumbbell``, ``hub``.
    params : dict
        Construction parameters, e.g. ``m``, ``radius``, ``eps`` (tube
        half-width), ``sep``, ``handles``, ``punctures`` (list of ``(x, y, r)``).
    """
    P = dict(params or {})
    P.update(kw)
    P = json.loads(json.dumps(P))  # normalise tuples to lists, reject non-JSON values
    holes, sym, feature = _validate(kind, P)
    phi = _level_set(kind, P)
    lo, hi = _bbox(kind, P)
    span = float(max(hi - lo))
    pitch = min(span / 400.0, feature / 8.0, P.get("eps", math.inf) / 8.0)
    for d in (q[2] for q in _punctures(P)):
        pitch = min(pitch, d / 6.0)
    margin = 0.05 * span + 4 * pitch
    loops = _extract_loops(phi, (lo - margin, hi + margin), pitch)
    if len(loops) != 1 + holes:
        raise GeometryError(f"{kind}: expected {1 + holes} boundary loops, found {len(loops)}; "
                            "features overlap or are under-resolved")
    loops = [CurveLoop(lp) for lp in loops]
    areas = [abs(lp.signed_area) for lp in loops]
    io = int(np.argmax(areas))
    outer = loops[io]
    if outer.signed_area < 0:
        outer = CurveLoop(outer.points[::-1].copy())
    hole_loops = []
    for i, lp in enumerate(loops):
        if i == io:
            continue
        if lp.signed_area > 0:
            lp = CurveLoop(lp.points[::-1].copy())
        hole_loops.append(lp)
    # deterministic hole order: by centroid angle then radius
    hole_loops.sort(key=lambda lp: (round(float(np.arctan2(*lp.points.mean(axis=0)[::-1])), 9),
                                    round(float(np.hypot(*lp.points.mean(axis=0))), 9)))
    spots = tuple((x, y, 0.4 * d, 3.0 * d) for x, y, d in _punctures(P))
    return DomainSpec(kind=kind, params=P, outer=outer, holes=tuple(hole_loops),
                      label=P.get("label", kind), symmetry=sym, refine_spots=spots,
                      min_feature=feature)


# ---------------------------------------------------------------------------
# mesh


@dataclass(frozen=True, eq=False)
class Mesh:
    """P1 triangulation with per-vertex boundary loop tags (-1 = interior)."""

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_tags: np.ndarray
    h: float
    domain: Optional[DomainSpec] = field(default=None, repr=False)
    symmetry: Optional[tuple] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        for a in (self.vertices, self.triangles, self.boundary_tags):
            a.setflags(write=False)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def boundary(self) -> np.ndarray:
        return self.boundary_tags >= 0

    @property
    def interior(self) -> np.ndarray:
        return self.boundary_tags < 0

    @property
    def n_loops(self) -> int:
        return int(self.boundary_tags.max()) + 1

    def cached(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    def clear_cache(self) -> None:
        """Drop derived operators (factorizations, fit matrices); they are rebuilt on demand."""
        self._cache.clear()

    @property
    def edges(self) -> np.ndarray:
        def make():
            t = self.triangles
            e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
            return np.unique(e, axis=0)
        return self.cached("edges", make)

    @property
    def areas(self) -> np.ndarray:
        def make():
            p = self.vertices[self.triangles]
            d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
            return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        return self.cached("areas", make)

    @property
    def adjacency(self):
        """Vertex adjacency as a CSR boolean matrix."""
        def make():
            from scipy import sparse
            e = self.edges
            n = self.n_vertices
            A = sparse.coo_matrix((np.ones(2 * len(e), dtype=bool),
                                   (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])), shape=(n, n))
            return A.tocsr()
        return self.cached("adjacency", make)

    @property
    def edge_lengths(self) -> np.ndarray:
        e = self.edges
        return np.hypot(*(self.vertices[e[:, 1]] - self.vertices[e[:, 0]]).T)

    @property
    def vertex_sizes(self) -> np.ndarray:
        """Mean length of the edges incident to each vertex."""
        def make():
            e = self.edges
            L = self.edge_lengths
            n = self.n_vertices
            s = np.bincount(e[:, 0], L, n) + np.bincount(e[:, 1], L, n)
            c = np.bincount(e[:, 0], minlength=n) + np.bincount(e[:, 1], minlength=n)
            return s / np.maximum(c, 1)
        return self.cached("vertex_sizes", make)

    def local_size(self, p, radius=None) -> float:
        """Mean edge length around the vertices within ``radius`` of ``p``."""
        from scipy.spatial import cKDTree
        radius = radius if radius is not None else 2 * self.h
        tree = self.cached("kdtree", lambda: cKDTree(self.vertices))
        near = tree.query_ball_point(np.asarray(p, dtype=float), radius)
        if len(near) == 0:
            near = tree.query(np.asarray(p, dtype=float), k=3)[1]
        return float(self.vertex_sizes[near].mean())

    def min_angle_deg(self) -> float:
        p = self.vertices[self.triangles]
        angs = []
        for i in range(3):
            a = p[:, (i + 1) % 3] - p[:, i]
            b = p[:, (i + 2) % 3] - p[:, i]
            c = (a * b).sum(1) / (np.hypot(*a.T) * np.hypot(*b.T))
            angs.append(np.degrees(np.arccos(np.clip(c, -1, 1))))
        return float(np.min(angs))

    def group_maps(self):
        """Vertex permutations for each element of the mesh symmetry group.

        Returns a list of ``(matrix, perm)`` with ``vertices[perm] ≈ vertices @ matrix.T``,
        identity first.
        """
        def make():
            mats = symmetry_matrices(self.symmetry)
            tree = cKDTree(self.vertices)
            out = []
            for M in mats:
                d, idx = tree.query(self.vertices @ M.T)
                if np.max(d) > self.h / 10:
                    raise GeometryError("mesh is not invariant under its symmetry group")
                out.append((M, idx))
            return out
        return self.cached("group_maps", make)

    def symmetrize(self, values: np.ndarray) -> np.ndarray:
        """Average nodal values over the symmetry group (values pulled back by each map)."""
        maps = self.group_maps()
        return sum(values[perm] for _, perm in maps) / len(maps)


def symmetry_matrices(sym) -> list:
    if sym is None:
        return [np.eye(2)]
    if sym[0] == "reflect":
        return [np.eye(2), np.diag([1.0, -1.0])]
    if sym[0] == "rotate":
        m = int(sym[1])
        out = []
        for j in range(m):
            a = 2 * math.pi * j / m
            out.append(np.array([[math.cos(a), -math.sin(a)], [math.sin(a), math.cos(a)]]))
        return out
    raise GeometryError(f"unknown symmetry tag {sym!r}")


# ---------------------------------------------------------------------------
# triangulation


class SizeField:
    """Target edge length: ``h`` away from refine spots, graded down near them.

    Each spot is ``(x, y, h_local, radius)``: size ``h_local`` within
    ``radius`` of ``(x, y)``, growing linearly with slope ``grading`` outside.
    """

    def __init__(self, h: float, spots=(), grading: float = 0.3):
        self.h = float(h)
        self.spots = [tuple(map(float, s)) for s in spots]
        self.grading = grading

    def __call__(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(p)
        s = np.full(len(p), self.h)
        for x, y, hl, rad in self.spots:
            d = np.hypot(p[:, 0] - x, p[:, 1] - y)
            s = np.minimum(s, hl + self.grading * np.clip(d - rad, 0.0, None))
        return s


def _resample(poly: np.ndarray, size: SizeField, closed: bool) -> np.ndarray:
    pts = np.vstack([poly, poly[:1]]) if closed else poly
    seg = np.hypot(*np.diff(pts, axis=0).T)
    mid = 0.5 * (pts[1:] + pts[:-1])
    w = seg / size(mid)
    cum = np.r_[0.0, np.cumsum(w)]
    n = max(int(math.ceil(cum[-1])), 3 if closed else 1)
    targets = np.linspace(0.0, cum[-1], n + 1)
    out = np.c_[np.interp(targets, cum, pts[:, 0]), np.interp(targets, cum, pts[:, 1])]
    return out[:-1] if closed else out


def _ray_intervals(phi: LevelSet, d: np.ndarray, tmax: float, pitch: float):
    t = np.arange(0.0, tmax + pitch, pitch)
    f = phi(t[:, None] * d[None, :])
    inside = f < 0
    roots = []

    def bisect(a, b):
        fa = phi((a * d)[None])[0]
        for _ in range(100):
            c = 0.5 * (a + b)
            fc = phi((c * d)[None])[0]
            if (fc < 0) == (fa < 0):
                a, fa = c, fc
            else:
                b = c
            if b - a < 1e-15 * max(1.0, tmax):
                break
        return 0.5 * (a + b)

    intervals = []
    start = 0.0 if inside[0] else None
    for i in range(1, len(t)):
        if inside[i] != inside[i - 1]:
            r = bisect(t[i - 1], t[i])
            roots.append(r)
            if inside[i]:
                start = r
            else:
                intervals.append((start, r))
                start = None
    if start is not None:
        raise GeometryError("ray leaves sampling box inside the domain")
    return intervals, roots


def _wedge_pieces(loops, phi, a0, a1, size, tmax, pitch, same_radii):
    d0 = np.array([math.cos(a0), math.sin(a0)])
    d1 = np.array([math.cos(a1), math.sin(a1)])

    def cross(u, v):
        return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]

    def inside(p):
        return (cross(d0, p) >= 0) & (cross(p, d1) >= 0)

    iv0, roots0 = _ray_intervals(phi, d0, tmax, pitch)
    if same_radii:
        iv1, roots1 = iv0, roots0
    else:
        iv1, roots1 = _ray_intervals(phi, d1, tmax, pitch)
    rays = [(d0, np.array(roots0)), (d1, np.array(roots1))]
    # loop points are sampled independently of the ray pitch
    seg = max(float(np.max(np.hypot(*np.diff(np.vstack([lp.points, lp.points[:1]]), axis=0).T)))
              for lp in loops)
    match_tol = 4 * pitch + seg

    def crossing(p, q):
        best = None
        for d, roots in rays:
            n = np.array([-d[1], d[0]])
            fp, fq = p @ n, q @ n
            if fp == fq or (fp > 0) == (fq > 0) and fp != 0 and fq != 0:
                continue
            s = fp / (fp - fq)
            x = p + s * (q - p)
            t = x @ d
            if t < 0 or len(roots) == 0:
                continue
            j = int(np.argmin(np.abs(roots - t)))
            if abs(roots[j] - t) > match_tol:
                continue
            cand = roots[j] * d
            dist = abs(roots[j] - t)
            if best is None or dist < best[0]:
                best = (dist, cand)
        if best is None:
            raise GeometryError("could not match a boundary crossing to a ray root")
        return best[1]

    open_pieces, closed_pieces = [], []
    for lp in loops:
        P = lp.points
        ins = inside(P)
        if ins.all():
            closed_pieces.append(P)
            continue
        if not ins.any():
            continue
        start = int(np.flatnonzero(~ins)[0])
        P = np.roll(P, -start, axis=0)
        ins = np.roll(ins, -start)
        n = len(P)
        i = 0
        while i < n:
            if not ins[i]:
                i += 1
                continue
            j = i
            while j + 1 < n and ins[j + 1]:
                j += 1
            entry = crossing(P[i - 1], P[i])
            exit_ = crossing(P[j], P[(j + 1) % n])
            open_pieces.append(np.vstack([entry, P[i:j + 1], exit_]))
            i = j + 1

    segs_pts = []
    for pc in open_pieces:
        r = _resample(pc, size, closed=False)
        r[1:-1] = project_to_boundary(phi, r[1:-1])
        segs_pts.append((r, False))
    for pc in closed_pieces:
        r = project_to_boundary(phi, _resample(pc, size, closed=True))
        segs_pts.append((r, True))

    def ray_pts(d, iv):
        out = []
        for ta, tb in iv:
            line = np.vstack([ta * d, tb * d])
            dense = np.linspace(ta, tb, max(2, int((tb - ta) / pitch) + 2))
            w = np.diff(dense) / size(0.5 * (dense[1:] + dense[:-1])[:, None] * d[None, :])
            cum = np.r_[0.0, np.cumsum(w)]
            n = max(1, int(math.ceil(cum[-1])))
            tt = np.interp(np.linspace(0, cum[-1], n + 1), cum, dense)
            tt[0], tt[-1] = ta, tb
            out.append(tt)
            del line
        return out

    radii0 = ray_pts(d0, iv0)
    radii1 = radii0 if same_radii else ray_pts(d1, iv1)
    for d, radii in ((d0, radii0), (d1, radii1)):
        for tt in radii:
            segs_pts.append((tt[:, None] * d[None, :], False))
    return segs_pts


def _pslg(pieces, scale):
    verts, segs = [], []
    index = {}

    def vid(p):
        key = (round(p[0] / scale, 11), round(p[1] / scale, 11))
        if key not in index:
            index[key] = len(verts)
            verts.append(p)
        return index[key]

    for pts, closed in pieces:
        ids = [vid(p) for p in pts]
        for a, b in zip(ids[:-1], ids[1:]):
            if a != b:
                segs.append((a, b))
        if closed and ids[-1] != ids[0]:
            segs.append((ids[-1], ids[0]))
    return np.array(verts), np.array(segs, dtype=np.int32)


def _mesh_region(pieces, phi, size: SizeField, min_angle: float, scale: float):
    V, S = _pslg(pieces, scale)
    lines = [LineString([V[a], V[b]]) for a, b in S]
    faces = list(polygonize(unary_union(lines)))
    holes = []
    for f in faces:
        rp = np.array(f.representative_point().coords[0])
        if phi(rp[None])[0] > 0:
            holes.append(rp)
    tri_in = dict(vertices=V, segments=S)
    if holes:
        tri_in["holes"] = np.array(holes)
    a0 = 0.4 * size.h ** 2
    out = _triangle.triangulate(tri_in, f"pq{min_angle}Ya{a0:.12g}")
    for _ in range(12):
        p = out["vertices"][out["triangles"]]
        cen = p.mean(axis=1)
        target = 0.4 * size(cen) ** 2
        d1, d2 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
        area = 0.5 * np.abs(d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])
        if np.all(area <= 1.5 * target):
            break
        out["triangle_max_area"] = target
        out = _triangle.triangulate(out, f"rpq{min_angle}Ya")
    return out["vertices"], out["triangles"]


def _merge_copies(V, T, mats, tol):
    allV, allT = [], []
    off = 0
    for M in mats:
        Vc = V @ M.T
        Tc = T.copy() if np.linalg.det(M) > 0 else T[:, [0, 2, 1]].copy()
        allV.append(Vc)
        allT.append(Tc + off)
        off += len(V)
    Vall = np.vstack(allV)
    Tall = np.vstack(allT)
    tree = cKDTree(Vall)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(Vall))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(len(Vall))])
    uniq, new = np.unique(roots, return_inverse=True)
    return Vall[uniq], new[Tall]


def _tag_boundary(V, T, spec: Optional[DomainSpec]):
    e = np.sort(np.vstack([T[:, [0, 1]], T[:, [1, 2]], T[:, [2, 0]]]), axis=1)
    ue, cnt = np.unique(e, axis=0, return_counts=True)
    if np.any(cnt > 2):
        raise GeometryError("non-conforming mesh: edge shared by more than two triangles")
    bverts = np.unique(ue[cnt == 1])
    tags = np.full(len(V), -1, dtype=np.int64)
    if spec is None:
        tags[bverts] = 0
        return tags
    loops = [spec.outer] + list(spec.holes)
    pts = np.vstack([lp.points for lp in loops])
    lid = np.concatenate([np.full(len(lp.points), i) for i, lp in enumerate(loops)])
    _, idx = cKDTree(pts).query(V[bverts])
    tags[bverts] = lid[idx]
    return tags


def triangulate(spec: DomainSpec, h: Optional[float] = None, refine=(), min_angle: float = 20.0,
                grading: float = 0.3) -> Mesh:
    """Conforming quality triangulation of ``spec`` with target edge length ``h``.

    ``refine`` adds local size spots ``(x, y, h_local, radius)``; the domain's own
    spots (around punctures) are always included.  Symmetric domains are meshed
    on a fundamental wedge and copied, so the vertex set is exactly invariant.
    """
    if h is None:
        h = min(0.02 * spec.diameter, spec.params.get("eps", math.inf) / 3.0)
    if not h > 0:
        raise GeometryError("h must be positive")
    eps = spec.params.get("eps")
    if eps is not None and 2.0 * eps / h - 1.0 < 3.0:
        raise GeometryError(f"h={h} too coarse: neck of half-width {eps} gets fewer than 3 vertices across")
    spots = list(spec.refine_spots) + [tuple(s) for s in refine]
    size = SizeField(h, spots, grading)
    phi = spec.phi
    scale = spec.diameter
    loops = [spec.outer] + list(spec.holes)
    sym = spec.symmetry
    # refine spots must respect the symmetry, otherwise mesh the full domain
    if sym is not None and spots:
        pts = np.array([s[:2] for s in spots])
        for M in symmetry_matrices(sym):
            d, _ = cKDTree(pts).query(pts @ M.T)
            if np.max(d) > 1e-9 * scale:
                sym = None
                break
    pitch = min(h, min(s[2] for s in spots) if spots else h) / 20.0
    tmax = 0.6 * scale + float(np.max(np.hypot(*spec.outer.points.T)))
    if sym is None:
        pieces = [(project_to_boundary(phi, _resample(lp.points, size, True)), True) for lp in loops]
        V, T = _mesh_region(pieces, phi, size, min_angle, scale)
        mats = [np.eye(2)]
    elif sym[0] == "reflect":
        pieces = _wedge_pieces(loops, phi, 0.0, math.pi, size, tmax, pitch, same_radii=False)
        V, T = _mesh_region(pieces, phi, size, min_angle, scale)
        mats = symmetry_matrices(sym)
    else:
        m = int(sym[1])
        a = math.pi / 2
        pieces = _wedge_pieces(loops, phi, a - math.pi / m, a + math.pi / m, size, tmax, pitch,
                               same_radii=True)
        V, T = _mesh_region(pieces, phi, size, min_angle, scale)
        # rotate about the ball-1 direction so that rotated rays coincide
        mats = symmetry_matrices(sym)
    V, T = _merge_copies(np.asarray(V, float), np.asarray(T, np.int64), mats, 1e-9 * scale)
    tags = _tag_boundary(V, T, spec)
    mesh = Mesh(vertices=V, triangles=T, boundary_tags=tags, h=float(h), domain=spec,
                symmetry=sym)
    validate_mesh(mesh)
    return mesh


def validate_mesh(mesh: Mesh) -> None:
    """Raise :class:`GeometryError` on degenerate or non-conforming meshes."""
    if np.any(mesh.areas <= 0):
        raise GeometryError("triangle with non-positive area")
    d, _ = cKDTree(mesh.vertices).query(mesh.vertices, k=2)
    if np.any(d[:, 1] <= mesh.h * 1e-6):
        raise GeometryError("duplicate vertices")
    t = mesh.triangles
    e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    _, cnt = np.unique(e, axis=0, return_counts=True)
    if np.any(cnt > 2):
        raise GeometryError("non-conforming mesh: edge shared by more than two triangles")
    if mesh.domain is not None:
        if euler_characteristic(mesh) != 1 - mesh.domain.k:
            raise GeometryError(f"Euler characteristic {euler_characteristic(mesh)} != 1-k = {1 - mesh.domain.k}")


def euler_characteristic(mesh: Mesh) -> int:
    """V - E + F of the triangulation."""
    t = mesh.triangles
    e = np.sort(np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]), axis=1)
    ue, cnt = np.unique(e, axis=0, return_counts=True)
    if np.any(cnt > 2):
        raise GeometryError("non-conforming mesh")
    used = np.unique(t)
    return int(len(used) - len(ue) + len(t))


def refine(mesh: Mesh) -> Mesh:
    """Uniform red refinement; new boundary vertices are projected onto the domain boundary."""
    V, T = mesh.vertices, mesh.triangles
    n = len(V)
    e = np.sort(np.vstack([T[:, [0, 1]], T[:, [1, 2]], T[:, [2, 0]]]), axis=1)
    ue, inv, cnt = np.unique(e, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    mid = 0.5 * (V[ue[:, 0]] + V[ue[:, 1]])
    bnd_edge = cnt == 1
    if mesh.domain is not None and bnd_edge.any():
        mid[bnd_edge] = project_to_boundary(mesh.domain.phi, mid[bnd_edge], scale=mesh.domain.diameter)
    nt = len(T)
    m01, m12, m20 = (n + inv[:nt], n + inv[nt:2 * nt], n + inv[2 * nt:])
    a, b, c = T[:, 0], T[:, 1], T[:, 2]
    newT = np.vstack([np.c_[a, m01, m20], np.c_[m01, b, m12], np.c_[m20, m12, c], np.c_[m01, m12, m20]])
    newV = np.vstack([V, mid])
    tags = np.r_[mesh.boundary_tags, np.full(len(ue), -1)]
    bt = np.flatnonzero(bnd_edge)
    tags[n + bt] = mesh.boundary_tags[ue[bt, 0]]
    out = Mesh(vertices=newV, triangles=newT.astype(np.int64), boundary_tags=tags.astype(np.int64),
               h=mesh.h / 2.0, domain=mesh.domain, symmetry=mesh.symmetry)
    validate_mesh(out)
    return out


# ---------------------------------------------------------------------------
# exchange format


def write_mesh(mesh: Mesh, path) -> None:
    with open(path, "w") as f:
        f.write(f"mesh v={mesh.n_vertices} t={len(mesh.triangles)}\n")
        for (x, y), tg in zip(mesh.vertices, mesh.boundary_tags):
            f.write(f"{x:.17g} {y:.17g} {int(tg)}\n")
        for i, j, k in mesh.triangles:
            f.write(f"{i} {j} {k}\n")


def read_mesh(path, h: Optional[float] = None) -> Mesh:
    with open(path) as f:
        header = f.readline().split()
        if not header or header[0] != "mesh":
            raise GeometryError("not a mesh file")
        kv = dict(x.split("=") for x in header[1:])
        nv, nt = int(kv["v"]), int(kv["t"])
        vdat = np.loadtxt(f, max_rows=nv, ndmin=2)
        tdat = np.loadtxt(f, max_rows=nt, dtype=np.int64, ndmin=2)
    V = vdat[:, :2].astype(float)
    tags = vdat[:, 2].astype(np.int64)
    if h is None:
        e = np.sort(np.vstack([tdat[:, [0, 1]], tdat[:, [1, 2]], tdat[:, [2, 0]]]), axis=1)
        e = np.unique(e, axis=0)
        h = float(np.hypot(*(V[e[:, 1]] - V[e[:, 0]]).T).mean())
    mesh = Mesh(vertices=V, triangles=tdat, boundary_tags=tags, h=h)
    validate_mesh(mesh)
    return mesh


def mesh_hash(mesh: Mesh) -> str:
    import hashlib
    hsh = hashlib.sha256()
    hsh.update(np.ascontiguousarray(mesh.vertices, dtype="<f8").tobytes())
    hsh.update(np.ascontiguousarray(mesh.triangles, dtype="<i8").tobytes())
    return hsh.hexdigest()[:16]
