"""Critical points of scalar fields: location, winding index, classification and index audits."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fem import (OutOfDomain, ScalarField, eval_gradients, eval_smooth_values, harmonic_solve, locate,
                  vertex_fits)
from .geometry import Mesh, euler_characteristic


class CensusError(RuntimeError):
    pass


class WindingError(CensusError):
    pass


@dataclass(frozen=True)
class CriticalPoint:
    location: tuple
    value: float
    kind: str
    index: int
    multiplicity: int
    hessian_eigs: tuple
    nondegenerate: bool
    grad_norm: float = 0.0

    def to_dict(self) -> dict:
        return {"x": self.location[0], "y": self.location[1], "kind": self.kind, "index": self.index,
                "multiplicity": self.multiplicity, "eigs": list(self.hessian_eigs),
                "nondegenerate": self.nondegenerate}


@dataclass
class CensusReport:
    points: list
    chi: int
    region: str = "domain"
    valid: bool = True
    notes: list = field(default_factory=list)

    @property
    def index_sum(self) -> int:
        return int(sum(p.index for p in self.points))

    @property
    def counts(self) -> dict:
        c = {"maxima": 0, "saddles": 0, "minima": 0, "degenerate": 0}
        key = {"max": "maxima", "saddle": "saddles", "min": "minima", "degenerate": "degenerate"}
        for p in self.points:
            c[key[p.kind]] += 1
        return c

    @property
    def total(self) -> int:
        return len(self.points)

    @property
    def consistent(self) -> bool:
        return self.valid and self.index_sum == self.chi

    def of_kind(self, kind: str) -> list:
        return [p for p in self.points if p.kind == kind]

    def restricted(self, disks) -> "CensusReport":
        """Census of the region left after removing the given disks ``[(x, y, r), ...]``."""
        keep = [p for p in self.points if not _in_disks(np.array(p.location)[None], disks)[0]]
        return CensusReport(keep, self.chi, region="D", valid=self.valid, notes=list(self.notes))

    def to_dict(self) -> dict:
        return {"chi": self.chi, "index_sum": self.index_sum, "region": self.region, "valid": self.valid,
                "counts": self.counts, "points": [p.to_dict() for p in self.points]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _in_disks(pts, disks) -> np.ndarray:
    out = np.zeros(len(pts), dtype=bool)
    for d in disks or ():
        out |= np.hypot(pts[:, 0] - d[0], pts[:, 1] - d[1]) < d[2]
    return out


def _diam(mesh: Mesh) -> float:
    if mesh.domain is not None:
        return mesh.domain.diameter
    return float(np.ptp(mesh.vertices, axis=0).max())


def field_scale(field: ScalarField) -> float:
    """Gradient scale ``max|u| / diam`` used for all census tolerances."""
    return float(np.max(np.abs(field.values))) / _diam(field.mesh)


# ---------------------------------------------------------------------------
# location


def _pl_zero_candidates(mesh: Mesh, g: np.ndarray, slack: float = 0.05) -> np.ndarray:
    """Zeros of the piecewise-linear interpolant of vertex gradients, one per triangle at most."""
    T = mesh.triangles
    g0, g1, g2 = g[T[:, 0]], g[T[:, 1]], g[T[:, 2]]
    a, b = g1 - g0, g2 - g0
    det = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
    good = np.abs(det) > 1e-300
    with np.errstate(divide="ignore", invalid="ignore"):
        l1 = (-g0[:, 0] * b[:, 1] + g0[:, 1] * b[:, 0]) / det
        l2 = (-a[:, 0] * g0[:, 1] + a[:, 1] * g0[:, 0]) / det
    l0 = 1 - l1 - l2
    inside = good & (l0 >= -slack) & (l1 >= -slack) & (l2 >= -slack)
    V = mesh.vertices
    idx = np.flatnonzero(inside)
    return (l0[idx, None] * V[T[idx, 0]] + l1[idx, None] * V[T[idx, 1]] + l2[idx, None] * V[T[idx, 2]])


def _vertex_newton_candidates(mesh: Mesh, g, H, reach: np.ndarray) -> np.ndarray:
    det = H[:, 0, 0] * H[:, 1, 1] - H[:, 0, 1] ** 2
    ok = np.abs(det) > 1e-300
    step = np.zeros_like(g)
    with np.errstate(divide="ignore", invalid="ignore"):
        step[:, 0] = (H[:, 1, 1] * g[:, 0] - H[:, 0, 1] * g[:, 1]) / det
        step[:, 1] = (-H[:, 0, 1] * g[:, 0] + H[:, 0, 0] * g[:, 1]) / det
    ok &= np.hypot(step[:, 0], step[:, 1]) <= reach
    return mesh.vertices[ok] - step[ok]


def _refine(field: ScalarField, p: np.ndarray, tol: float, max_iter: int = 12):
    """Newton on the patch-fit gradient.

    Returns ``(point, grad norm, last Newton step length)`` for the best
    iterate, or None when the iteration leaves the domain immediately.
    """
    mesh = field.mesh
    best = None
    reach = 3 * mesh.local_size(p)
    for _ in range(max_iter):
        if locate(mesh, p[None])[0] < 0:
            return best
        g, H = eval_gradients(field, p[None], with_hessian=True)
        g, H = g[0], H[0]
        gn = float(np.hypot(*g))
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = np.array([np.inf, np.inf])
        sl = float(np.hypot(*step))
        if best is None or gn < best[1]:
            best = (p.copy(), gn, sl)
        if gn <= tol or not np.isfinite(sl) or sl > reach:
            return best
        p = p + step
    return best


def locate_critical_points(field: ScalarField, exclusion=None, tol: Optional[float] = None,
                           accept: Optional[float] = None) -> np.ndarray:
    """Isolated zeros of the recovered gradient.

    Candidates come from the piecewise-linear interpolant of vertex-fit
    gradients and from one Newton step of each vertex fit; each is polished
    by Newton on the triangle patch fits.  A zero is accepted when the
    recovered gradient drops below ``tol`` (``1e-6·scale``) or, where the
    patch fits jump across an edge, when the remaining Newton step is below a
    quarter of the local cell size or the gradient below ``accept``
    (``1e-6·scale`` by default as well).
    Duplicates within three local cell sizes are merged.
    """
    mesh = field.mesh
    scale = field_scale(field)
    if scale == 0:
        return np.zeros((0, 2))
    tol = 1e-6 * scale if tol is None else tol
    accept = tol if accept is None else accept
    g, H = vertex_fits(field)
    reach = np.zeros(mesh.n_vertices)
    E = mesh.edges
    L = mesh.edge_lengths
    np.maximum.at(reach, E[:, 0], L)
    np.maximum.at(reach, E[:, 1], L)
    cands = np.vstack([_pl_zero_candidates(mesh, g), _vertex_newton_candidates(mesh, g, H, reach)])
    found = []
    for p in cands:
        r = _refine(field, p.copy(), tol)
        if r is None:
            continue
        if r[1] <= tol or r[2] <= 0.25 * mesh.local_size(r[0]) or r[1] <= accept:
            found.append(r)
    if not found:
        return np.zeros((0, 2))
    pts = np.array([f[0] for f in found])
    gn = np.array([f[1] for f in found])
    ok = (locate(mesh, pts) >= 0) & ~_in_disks(pts, exclusion)
    # drop zeros sitting in boundary triangles: one-sided fits there are not trusted
    tri = locate(mesh, pts)
    bt = mesh.boundary[mesh.triangles[np.maximum(tri, 0)]].all(axis=1)
    ok &= ~bt
    pts, gn = pts[ok], gn[ok]
    order = np.argsort(gn, kind="stable")
    keep = []
    # cluster radius: three local cells (the mesh may be graded)
    rad = np.array([3 * mesh.local_size(p, radius=2 * mesh.local_size(p)) for p in pts])
    for i in order:
        if all(np.hypot(*(pts[i] - pts[j])) > min(rad[i], rad[j]) for j in keep):
            keep.append(i)
    keep.sort(key=lambda i: (round(pts[i, 0], 9), round(pts[i, 1], 9)))
    return pts[keep]


# ---------------------------------------------------------------------------
# index


def winding_index(field: ScalarField, center, radius: float, samples: int = 64,
                  others: Optional[np.ndarray] = None) -> int:
    """Degree of the recovered gradient on the circle ``|x - center| = radius``."""
    if samples < 64:
        raise ValueError("at least 64 samples")
    c = np.asarray(center, dtype=float)
    if others is not None and len(others):
        d = np.hypot(*(np.asarray(others) - c).T)
        d = d[d > 1e-12]
        if len(d) and d.min() < 2 * radius:
            raise WindingError("another critical point lies within twice the winding radius")
    scale = field_scale(field)
    n = samples
    for _ in range(5):
        th = 2 * np.pi * np.arange(n) / n
        pts = c + radius * np.c_[np.cos(th), np.sin(th)]
        try:
            g = eval_gradients(field, pts)
        except OutOfDomain as exc:
            raise WindingError("winding circle leaves the domain") from exc
        mag = np.hypot(g[:, 0], g[:, 1])
        if np.any(mag < 1e-9 * scale):
            raise WindingError("gradient vanishes on the winding circle")
        ang = np.arctan2(g[:, 1], g[:, 0])
        dang = np.diff(np.r_[ang, ang[0]])
        dang = (dang + np.pi) % (2 * np.pi) - np.pi
        total = dang.sum() / (2 * np.pi)
        k = int(round(total))
        if abs(total - k) * 2 * np.pi > 0.1:
            raise WindingError("ambiguous winding number")
        if np.max(np.abs(dang)) < np.pi / 3:
            return k
        n *= 2
    raise WindingError("gradient turns too fast on the circle; change the radius")


def _winding_radius(field: ScalarField, p, others) -> float:
    mesh = field.mesh
    h = mesh.local_size(p)
    B = mesh.vertices[mesh.boundary]
    db = float(np.min(np.hypot(*(B - p).T)))
    r = min(4.0 * h, 0.5 * db)
    if others is not None and len(others):
        d = np.hypot(*(np.asarray(others) - p).T)
        d = d[d > 1e-12]
        if len(d):
            r = min(r, 0.45 * d.min())
    return max(r, 1.5 * h)


def robust_index(field: ScalarField, p, others=None) -> int:
    """Winding index at two radii; raises when they disagree."""
    r = _winding_radius(field, p, others)
    k1 = winding_index(field, p, r, others=None)
    k2 = winding_index(field, p, 0.7 * r, others=None)
    if k1 != k2:
        raise WindingError(f"winding index not radius-stable ({k1} vs {k2})")
    return k1


def classify_point(field: ScalarField, p, others=None) -> CriticalPoint:
    p = np.asarray(p, dtype=float)
    idx = robust_index(field, p, others)
    g, H = eval_gradients(field, p[None], with_hessian=True)
    eig = np.linalg.eigvalsh(H[0])
    val = float(eval_smooth_values(field, p[None])[0])
    amax = float(np.max(np.abs(eig)))
    if eig[1] < 0:
        kind, pred = "max", 1
    elif eig[0] > 0:
        kind, pred = "min", 1
    else:
        kind, pred = "saddle", -1
    nondeg = amax > 0 and float(np.min(np.abs(eig))) >= 1e-3 * amax and idx == pred
    if not nondeg:
        kind = "degenerate"
    return CriticalPoint(location=(float(p[0]), float(p[1])), value=val, kind=kind, index=int(idx),
                         multiplicity=max(-int(idx), 0), hessian_eigs=(float(eig[0]), float(eig[1])),
                         nondegenerate=bool(nondeg), grad_norm=float(np.hypot(*g[0])))


def boundary_normal_derivative(field: ScalarField) -> np.ndarray:
    """Inward normal derivative of the recovered gradient at every boundary vertex."""
    mesh = field.mesh
    V = mesh.vertices
    B = np.flatnonzero(mesh.boundary)
    T = mesh.triangles
    # boundary edges have a single adjacent triangle; its third vertex fixes the inward side
    te = np.vstack([T[:, [0, 1, 2]], T[:, [1, 2, 0]], T[:, [2, 0, 1]]])
    key = np.sort(te[:, :2], axis=1)
    _, inv, cnt = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    be = te[cnt[inv.ravel()] == 1]
    a, b, c = V[be[:, 0]], V[be[:, 1]], V[be[:, 2]]
    t = b - a
    nrm = np.c_[-t[:, 1], t[:, 0]]
    flip = np.sum(nrm * (c - a), axis=1) < 0
    nrm[flip] *= -1
    acc = np.zeros((mesh.n_vertices, 2))
    np.add.at(acc, be[:, 0], nrm)
    np.add.at(acc, be[:, 1], nrm)
    n = acc[B]
    n /= np.maximum(np.hypot(n[:, 0], n[:, 1]), 1e-300)[:, None]
    g, _ = vertex_fits(field)
    return np.sum(g[B] * n, axis=1)


def census(field: ScalarField, exclusion=None, check_boundary: bool = True) -> CensusReport:
    """Locate and classify every interior critical point."""
    mesh = field.mesh
    chi = euler_characteristic(mesh)
    notes = []
    valid = True
    if check_boundary:
        dn = boundary_normal_derivative(field)
        if np.min(np.abs(dn)) <= 1e-6 * field_scale(field):
            valid = False
            notes.append("boundary critical point detected")
    pts = locate_critical_points(field, exclusion)
    out = []
    for i, p in enumerate(pts):
        others = np.delete(pts, i, axis=0)
        try:
            out.append(classify_point(field, p, others))
        except WindingError as exc:
            valid = False
            notes.append(f"winding failed at ({p[0]:.4f}, {p[1]:.4f}): {exc}")
    region = "D" if exclusion else "domain"
    return CensusReport(out, chi, region=region, valid=valid, notes=notes)


def poincare_hopf_check(field: ScalarField, peaks=None, rho: Optional[float] = None) -> CensusReport:
    """Whole-domain census; index sum must equal the Euler characteristic.

    With ``peaks`` and ``rho`` the report notes carry the split between the
    peak balls and the remaining region.
    """
    rep = census(field)
    if not rep.consistent and rep.valid:
        rep.notes.append(f"index sum {rep.index_sum} differs from chi {rep.chi}")
    if peaks is not None and rho is not None:
        disks = [(p[0], p[1], rho) for p in np.atleast_2d(peaks)]
        d = rep.restricted(disks)
        rep.notes.append(f"peak-ball index {rep.index_sum - d.index_sum}, D-region index {d.index_sum}")
    return rep


def am_identity_check(mesh: Mesh, loop_constants: Sequence[float]):
    """Harmonic field with constant boundary values per loop; returns (multiplicity sum, N, report)."""
    c = np.asarray(loop_constants, dtype=float)
    if len(c) < 2:
        raise ValueError("need at least two boundary loops")
    if np.ptp(c) == 0:
        raise ValueError("all loop constants equal: the harmonic field is constant")
    u = harmonic_solve(mesh, c)
    rep = census(u)
    msum = int(sum(p.multiplicity for p in rep.points))
    if msum != len(c) - 2:
        rep.notes.append(f"multiplicity sum {msum} differs from N-2 = {len(c) - 2}")
    return msum, len(c), rep


# ---------------------------------------------------------------------------
# peaks


def local_maxima(field: ScalarField) -> np.ndarray:
    """Refined positions of strict interior vertex maxima, sorted by height descending."""
    mesh = field.mesh
    u = field.values
    A = mesh.adjacency.tocsr()
    nb_max = np.full(mesh.n_vertices, -np.inf)
    rows = np.repeat(np.arange(mesh.n_vertices), np.diff(A.indptr))
    np.maximum.at(nb_max, rows, u[A.indices])
    cand = np.flatnonzero(mesh.interior & (u > nb_max))
    pts = []
    scale = field_scale(field)
    for v in cand:
        r = _refine(field, mesh.vertices[v].copy(), 1e-9 * max(scale, 1e-300))
        p = r[0] if r is not None and np.hypot(*(r[0] - mesh.vertices[v])) < 2 * mesh.local_size(mesh.vertices[v]) \
            else mesh.vertices[v]
        pts.append(p)
    if not pts:
        return np.zeros((0, 2))
    pts = np.array(pts)
    heights = eval_smooth_values(field, pts)
    pts = pts[np.argsort(-heights, kind="stable")]
    # mirror-image vertex maxima next to a symmetric peak refine to the same point
    keep = []
    for p in pts:
        if all(np.hypot(*(p - q)) > 0.25 * mesh.local_size(p) for q in keep):
            keep.append(p)
    return np.array(keep)


def radial_monotonicity_check(field: ScalarField, peak, rho: float, rings: int = 16, rays: int = 32):
    """Whether ``(x - x_peak)·∇u < 0`` on rings ``2h ≤ r ≤ rho``; returns (ok, least-negative value)."""
    c = np.asarray(getattr(peak, "location", peak), dtype=float)
    h = field.mesh.local_size(c)
    if rho <= 2 * h:
        raise ValueError("rho must exceed twice the local mesh size")
    r = np.linspace(2 * h, rho, rings)
    th = 2 * np.pi * np.arange(rays) / rays
    R, TH = np.meshgrid(r, th, indexing="ij")
    d = np.c_[(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel()]
    try:
        g = eval_gradients(field, c + d)
    except OutOfDomain as exc:
        raise CensusError("monotonicity ring leaves the domain") from exc
    s = np.sum(d * g, axis=1)
    worst = float(np.max(s))
    return worst < 0, worst
