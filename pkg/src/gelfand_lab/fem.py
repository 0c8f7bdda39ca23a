"""P1 finite elements: assembly, Dirichlet harmonic solves, evaluation and gradient recovery."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from matplotlib.tri import Triangulation
from scipy import sparse
from scipy.sparse import linalg as spla

from .geometry import Mesh, mesh_hash


class OutOfDomain(ValueError):
    """Evaluation point lies outside the triangulation."""


@dataclass(frozen=True, eq=False)
class ScalarField:
    mesh: Mesh
    values: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.mesh.n_vertices,):
            raise ValueError(f"field has {v.shape} values for {self.mesh.n_vertices} vertices")
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __call__(self, pts):
        return eval_values(self, pts)

    @property
    def sup(self) -> float:
        return float(np.max(np.abs(self.values)))

    # serialisation -------------------------------------------------------

    def to_json(self) -> str:
        return json.dumps({"mesh_hash": mesh_hash(self.mesh), "values": self.values.tolist()})

    def to_bytes(self) -> bytes:
        h = mesh_hash(self.mesh).encode()
        return (struct.pack("<I", len(h)) + h + struct.pack("<Q", len(self.values))
                + np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def from_json(cls, text: str, mesh: Mesh) -> "ScalarField":
        d = json.loads(text)
        _check_hash(d.get("mesh_hash"), mesh)
        return cls(mesh, np.array(d["values"], dtype=float))

    @classmethod
    def from_bytes(cls, data: bytes, mesh: Mesh) -> "ScalarField":
        (nh,) = struct.unpack_from("<I", data, 0)
        h = data[4:4 + nh].decode()
        (n,) = struct.unpack_from("<Q", data, 4 + nh)
        vals = np.frombuffer(data, dtype="<f8", count=n, offset=12 + nh)
        _check_hash(h, mesh)
        return cls(mesh, vals.astype(float))


def _check_hash(h, mesh):
    if h is not None and h != mesh_hash(mesh):
        raise ValueError("field was saved for a different mesh")


def load_field(path, mesh: Mesh) -> ScalarField:
    with open(path, "rb") as f:
        data = f.read()
    if data[:1] == b"{":
        return ScalarField.from_json(data.decode(), mesh)
    return ScalarField.from_bytes(data, mesh)


# ---------------------------------------------------------------------------
# assembly


def assemble(mesh: Mesh):
    """P1 stiffness matrix (CSR) and lumped mass vector."""
    def make():
        V, T = mesh.vertices, mesh.triangles
        p = V[T]
        area = mesh.areas
        if np.any(area <= 0):
            raise ValueError("degenerate triangle encountered")
        # gradients of barycentric basis functions
        b = np.stack([p[:, 1, 1] - p[:, 2, 1], p[:, 2, 1] - p[:, 0, 1], p[:, 0, 1] - p[:, 1, 1]], axis=1)
        c = np.stack([p[:, 2, 0] - p[:, 1, 0], p[:, 0, 0] - p[:, 2, 0], p[:, 1, 0] - p[:, 0, 0]], axis=1)
        Ke = (b[:, :, None] * b[:, None, :] + c[:, :, None] * c[:, None, :]) / (4.0 * area[:, None, None])
        rows = np.repeat(T, 3, axis=1).ravel()
        cols = np.tile(T, (1, 3)).ravel()
        n = mesh.n_vertices
        K = sparse.coo_matrix((Ke.ravel(), (rows, cols)), shape=(n, n)).tocsr()
        K.sum_duplicates()
        M = np.bincount(T.ravel(), weights=np.repeat(area / 3.0, 3), minlength=n)
        return K, M
    return mesh.cached("assemble", make)


def interior_factor(mesh: Mesh):
    """Sparse LU of the interior stiffness block, cached on the mesh."""
    def make():
        K, _ = assemble(mesh)
        I = np.flatnonzero(mesh.interior)
        if len(I) == 0:
            raise ValueError("singular system: mesh has no interior vertices")
        KII = K[I][:, I].tocsc()
        KIB = K[I][:, np.flatnonzero(mesh.boundary)].tocsr()
        return I, spla.splu(KII), KIB
    return mesh.cached("interior_factor", make)


def boundary_data(mesh: Mesh, loop_values) -> np.ndarray:
    """Expand per-loop constants or a per-vertex trace into boundary-vertex values."""
    lv = np.asarray(loop_values, dtype=float)
    B = np.flatnonzero(mesh.boundary)
    if lv.ndim == 0:
        return np.full(len(B), float(lv))
    if lv.shape == (mesh.n_vertices,):
        return lv[B]
    if lv.shape == (len(B),):
        return lv
    if lv.shape == (mesh.n_loops,):
        return lv[mesh.boundary_tags[B]]
    raise ValueError("boundary data must be one value per loop, per boundary vertex, or per vertex")


def harmonic_solve(mesh: Mesh, loop_values) -> ScalarField:
    """Discrete harmonic function with the given Dirichlet data."""
    g = boundary_data(mesh, loop_values)
    if not np.all(np.isfinite(g)):
        raise ValueError("boundary data must be finite")
    I, lu, KIB = interior_factor(mesh)
    u = np.empty(mesh.n_vertices)
    u[mesh.boundary] = g
    u[I] = lu.solve(-(KIB @ g))
    return ScalarField(mesh, u)


def harmonic_solve_many(mesh: Mesh, traces: np.ndarray) -> np.ndarray:
    """Batch version: ``traces`` has shape (n_boundary, k); returns (n_vertices, k)."""
    I, lu, KIB = interior_factor(mesh)
    traces = np.atleast_2d(np.asarray(traces, dtype=float).T).T
    out = np.empty((mesh.n_vertices, traces.shape[1]))
    out[mesh.boundary] = traces
    out[I] = lu.solve(-(KIB @ traces))
    return out


# ---------------------------------------------------------------------------
# point location and evaluation


def _trifinder(mesh: Mesh):
    def make():
        tri = Triangulation(mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.triangles)
        return tri.get_trifinder()
    return mesh.cached("trifinder", make)


def locate(mesh: Mesh, pts) -> np.ndarray:
    """Index of the containing triangle for each point, -1 outside."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    return np.asarray(_trifinder(mesh)(pts[:, 0], pts[:, 1]), dtype=np.int64)


def barycentric(mesh: Mesh, tri: np.ndarray, pts: np.ndarray) -> np.ndarray:
    p = mesh.vertices[mesh.triangles[tri]]
    v0, v1 = p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]
    w = pts - p[:, 0]
    det = v0[:, 0] * v1[:, 1] - v0[:, 1] * v1[:, 0]
    l1 = (w[:, 0] * v1[:, 1] - w[:, 1] * v1[:, 0]) / det
    l2 = (v0[:, 0] * w[:, 1] - v0[:, 1] * w[:, 0]) / det
    return np.stack([1 - l1 - l2, l1, l2], axis=1)


def eval_values(field: ScalarField, pts, strict: bool = True) -> np.ndarray:
    """Barycentric interpolation at points; NaN (or :class:`OutOfDomain`) outside."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    mesh = field.mesh
    tri = locate(mesh, pts)
    out = np.full(len(pts), np.nan)
    ok = tri >= 0
    if strict and not ok.all():
        raise OutOfDomain(f"{np.count_nonzero(~ok)} point(s) outside the domain")
    lam = barycentric(mesh, tri[ok], pts[ok])
    out[ok] = (lam * field.values[mesh.triangles[tri[ok]]]).sum(axis=1)
    return out


# quadratic patch fits -------------------------------------------------------
#
# Coefficients are (c, gx, gy, hxx, hxy, hyy) of
#   q(d) = c + g.d + d.H.d / 2,   d = (x - center) / scale.


def _patch_sets(mesh: Mesh, seeds, rings: int):
    """CSR boolean matrix: row i lists vertices within ``rings`` edges of seed set i."""
    n = mesh.n_vertices
    AI = (mesh.adjacency + sparse.identity(n, dtype=bool, format="csr")).astype(bool)
    S = seeds.astype(bool)
    for _ in range(rings):
        S = (S @ AI).astype(bool)
    S = S.tocsr()
    S.sort_indices()
    return S


def _fit_operators(mesh: Mesh, patches, centers: np.ndarray, scales: np.ndarray) -> sparse.csr_matrix:
    """Sparse (6*len(centers), n) operator of least-squares quadratic fits."""
    n_fit = len(centers)
    sizes = np.diff(patches.indptr)
    rows, cols, vals = [], [], []
    for size in np.unique(sizes):
        sel = np.flatnonzero(sizes == size)
        idx = np.stack([patches.indices[patches.indptr[i]:patches.indptr[i + 1]] for i in sel])
        d = (mesh.vertices[idx] - centers[sel, None, :]) / scales[sel, None, None]
        x, y = d[..., 0], d[..., 1]
        A = np.stack([np.ones_like(x), x, y, 0.5 * x * x, x * y, 0.5 * y * y], axis=2)
        P = np.linalg.pinv(A)  # (g, 6, size)
        r = (6 * sel[:, None, None] + np.arange(6)[None, :, None]) * np.ones((1, 1, size), dtype=np.int64)
        c = np.broadcast_to(idx[:, None, :], P.shape)
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(P.ravel())
    return sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(6 * n_fit, mesh.n_vertices))


def triangle_fit_operator(mesh: Mesh):
    """Quadratic fit per triangle over its vertices and their neighbours.

    Returns ``(op, centers, scales)``; ``(op @ values).reshape(-1, 6)`` are the
    coefficients in the scaled local coordinates of each triangle.
    """
    def make():
        T = mesh.triangles
        nt = len(T)
        seeds = sparse.csr_matrix((np.ones(3 * nt, dtype=bool), (np.repeat(np.arange(nt), 3), T.ravel())),
                                  shape=(nt, mesh.n_vertices))
        patches = _patch_sets(mesh, seeds, 1)
        centers = mesh.vertices[T].mean(axis=1)
        scales = np.sqrt(2.0 * np.abs(mesh.areas))
        return _fit_operators(mesh, patches, centers, scales), centers, scales
    return mesh.cached("triangle_fit_op", make)


def vertex_fit_operator(mesh: Mesh, rings: int = 2):
    """Quadratic fit centred at every vertex over its ``rings``-ring; returns ``(op, scales)``."""
    def make():
        n = mesh.n_vertices
        patches = _patch_sets(mesh, sparse.identity(n, dtype=bool, format="csr"), rings)
        A = mesh.adjacency.tocoo()
        el = np.hypot(*(mesh.vertices[A.row] - mesh.vertices[A.col]).T)
        scales = np.bincount(A.row, weights=el, minlength=n) / np.maximum(np.bincount(A.row, minlength=n), 1)
        return _fit_operators(mesh, patches, mesh.vertices, scales), scales
    return mesh.cached(("vertex_fit_op", rings), make)


def triangle_coeffs(field: ScalarField) -> np.ndarray:
    c = field.meta.get("_tri_coeffs")
    if c is None:
        op, _, _ = triangle_fit_operator(field.mesh)
        c = (op @ field.values).reshape(-1, 6)
        field.meta["_tri_coeffs"] = c
    return c


def eval_gradients(field: ScalarField, pts, strict: bool = True, with_hessian: bool = False):
    """Recovered gradient (and optionally Hessian) from the containing triangle's quadratic fit."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    mesh = field.mesh
    tri = locate(mesh, pts)
    ok = tri >= 0
    if strict and not ok.all():
        raise OutOfDomain(f"{np.count_nonzero(~ok)} point(s) outside the domain")
    g = np.full((len(pts), 2), np.nan)
    H = np.full((len(pts), 2, 2), np.nan)
    if ok.any():
        _, centers, scales = triangle_fit_operator(mesh)
        tt = tri[ok]
        C = triangle_coeffs(field)[tt]
        s = scales[tt]
        d = (pts[ok] - centers[tt]) / s[:, None]
        gx = C[:, 1] + C[:, 3] * d[:, 0] + C[:, 4] * d[:, 1]
        gy = C[:, 2] + C[:, 4] * d[:, 0] + C[:, 5] * d[:, 1]
        g[ok] = np.c_[gx, gy] / s[:, None]
        if with_hessian:
            H[ok] = np.stack([np.c_[C[:, 3], C[:, 4]], np.c_[C[:, 4], C[:, 5]]], axis=1) / (s ** 2)[:, None, None]
    return (g, H) if with_hessian else g


def eval_smooth_values(field: ScalarField, pts, strict: bool = True) -> np.ndarray:
    """Values from the quadratic patch fit (higher order than barycentric)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    mesh = field.mesh
    tri = locate(mesh, pts)
    ok = tri >= 0
    if strict and not ok.all():
        raise OutOfDomain(f"{np.count_nonzero(~ok)} point(s) outside the domain")
    out = np.full(len(pts), np.nan)
    _, centers, scales = triangle_fit_operator(mesh)
    tt = tri[ok]
    C = triangle_coeffs(field)[tt]
    d = (pts[ok] - centers[tt]) / scales[tt, None]
    out[ok] = (C[:, 0] + C[:, 1] * d[:, 0] + C[:, 2] * d[:, 1]
               + 0.5 * C[:, 3] * d[:, 0] ** 2 + C[:, 4] * d[:, 0] * d[:, 1] + 0.5 * C[:, 5] * d[:, 1] ** 2)
    return out


def eval_field(field: ScalarField, p):
    """Value (barycentric) and recovered gradient at one point."""
    p = np.asarray(p, dtype=float).reshape(1, 2)
    val = eval_values(field, p)[0]
    grad = eval_gradients(field, p)[0]
    return float(val), grad


def vertex_fits(field: ScalarField, rings: int = 2):
    """Fitted gradients (n, 2) and Hessians (n, 2, 2) at every vertex."""
    op, s = vertex_fit_operator(field.mesh, rings)
    c = (op @ field.values).reshape(-1, 6)
    g = c[:, 1:3] / s[:, None]
    H = np.stack([c[:, [3, 4]], c[:, [4, 5]]], axis=1) / (s ** 2)[:, None, None]
    return g, H


def interpolant(mesh: Mesh, fn) -> ScalarField:
    """Nodal interpolant of a callable ``fn(x, y)``."""
    x, y = mesh.vertices[:, 0], mesh.vertices[:, 1]
    return ScalarField(mesh, np.asarray(fn(x, y), dtype=float) * np.ones(mesh.n_vertices))
