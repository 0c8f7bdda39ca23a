"""Numerical Green, Robin and Kirchhoff-Routh functions of a meshed domain."""

from __future__ import annotations

import math
import threading
from collections import OrderedDict
from typing import Optional, Sequence

import numpy as np

from .fem import ScalarField, eval_smooth_values, harmonic_solve_many, locate
from .geometry import Mesh, symmetry_matrices

TWO_PI = 2.0 * math.pi


class GreensError(ValueError):
    pass


class GreensEvaluator:
    """Green function ``G(x, y) = log(1/|x-y|)/2π + H(x, y)`` with cached correctors.

    ``H(., y)`` is the discrete harmonic extension of ``log|z - y| / 2π`` from
    the boundary.  Correctors are keyed by the source point rounded to
    ``key_pitch`` (exact sources by default) and kept in a least-recently-used
    cache of at most ``cache_mb`` megabytes.
    """

    def __init__(self, mesh: Mesh, key_pitch: Optional[float] = None, cache_mb: float = 128.0):
        self.mesh = mesh
        self.key_pitch = key_pitch
        self.max_cached = max(8, int(cache_mb * 2**20 // (8 * mesh.n_vertices)))
        self._cache: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self._B = np.flatnonzero(mesh.boundary)

    @property
    def h(self) -> float:
        return self.mesh.h

    def _key(self, y):
        p = self.key_pitch or 1e-12 * max(1.0, self.mesh.h)
        return (round(float(y[0]) / p), round(float(y[1]) / p))

    def check_interior(self, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        if np.any(locate(self.mesh, pts) < 0):
            raise GreensError("point outside the domain")
        return pts

    def correctors(self, ys) -> list:
        """Nodal corrector arrays ``H(., y)`` for each source ``y``."""
        ys = self.check_interior(ys)
        return [f.values for f in self._fields(ys)]

    def _fields(self, ys) -> list:
        keys = [self._key(y) for y in ys]
        with self._lock:
            found = {k: self._cache[k] for k in keys if k in self._cache}
            for k in found:
                self._cache.move_to_end(k)
        missing = [i for i, k in enumerate(keys) if k not in found]
        if missing:
            Vb = self.mesh.vertices[self._B]
            traces = np.stack([np.log(np.hypot(*(Vb - ys[i]).T)) / TWO_PI for i in missing], axis=1)
            sols = harmonic_solve_many(self.mesh, traces)
            with self._lock:
                for j, i in enumerate(missing):
                    f = found.setdefault(keys[i], ScalarField(self.mesh, sols[:, j].copy()))
                    self._cache[keys[i]] = f
                while len(self._cache) > self.max_cached:
                    self._cache.popitem(last=False)
        return [found[k] for k in keys]

    def corrector_field(self, y) -> ScalarField:
        return self._fields(self.check_interior(y))[0]

    def H(self, x, y) -> float:
        return float(self.H_many(x, y)[0])

    def H_many(self, xs, y) -> np.ndarray:
        return eval_smooth_values(self.corrector_field(y), np.atleast_2d(xs))


def green_eval(ev: GreensEvaluator, x, y):
    """Return ``(G(x, y), H(x, y))``; ``G`` undefined (error) for ``x == y``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    ev.check_interior(np.vstack([x, y]))
    Hv = float(ev.H_many(x[None], y)[0])
    r = float(np.hypot(*(x - y)))
    if r == 0.0:
        raise GreensError("G(x, y) is singular at x == y; use robin_eval for H(y, y)")
    return math.log(1.0 / r) / TWO_PI + Hv, Hv


def robin_eval(ev: GreensEvaluator, x) -> float:
    """Robin function ``R(x) = H(x, x)``."""
    x = np.asarray(x, dtype=float)
    return float(ev.H_many(x[None], x)[0])


def _kr_value(ev: GreensEvaluator, pts: np.ndarray) -> float:
    m = len(pts)
    val = 0.0
    for j in range(m):
        Hj = ev.H_many(pts, pts[j])
        val += 0.5 * Hj[j]
        for i in range(m):
            if i != j:
                r = float(np.hypot(*(pts[i] - pts[j])))
                val += 0.5 * (math.log(1.0 / r) / TWO_PI + Hj[i])
    return val


def _fd_step(ev: GreensEvaluator) -> float:
    diam = ev.mesh.domain.diameter if ev.mesh.domain is not None else float(np.ptp(ev.mesh.vertices, axis=0).max())
    return max(ev.h / 2.0, 1e-3 * diam)


def _check_config(ev: GreensEvaluator, pts: np.ndarray, min_dist: float = 0.0):
    ev.check_interior(pts)
    m = len(pts)
    for i in range(m):
        for j in range(i):
            d = float(np.hypot(*(pts[i] - pts[j])))
            if d == 0.0 or d < min_dist:
                raise GreensError("coincident points")


def kirchhoff_routh(ev: GreensEvaluator, pts, step: Optional[float] = None):
    """KR value and its gradient (central differences, length 2m)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    _check_config(ev, pts)
    s = step or _fd_step(ev)
    val = _kr_value(ev, pts)
    grad = np.empty(pts.size)
    flat = pts.ravel()
    for i in range(pts.size):
        e = np.zeros_like(flat)
        e[i] = s
        grad[i] = (_kr_value(ev, (flat + e).reshape(-1, 2)) - _kr_value(ev, (flat - e).reshape(-1, 2))) / (2 * s)
    return val, grad


def _kr_hessian(ev, pts, s):
    n = pts.size
    x = pts.ravel()
    f0 = _kr_value(ev, pts)
    fp = np.empty(n)
    fm = np.empty(n)
    H = np.empty((n, n))
    E = np.eye(n) * s
    for i in range(n):
        fp[i] = _kr_value(ev, (x + E[i]).reshape(-1, 2))
        fm[i] = _kr_value(ev, (x - E[i]).reshape(-1, 2))
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / s ** 2
    for i in range(n):
        for j in range(i):
            fpp = _kr_value(ev, (x + E[i] + E[j]).reshape(-1, 2))
            fpm = _kr_value(ev, (x + E[i] - E[j]).reshape(-1, 2))
            fmp = _kr_value(ev, (x - E[i] + E[j]).reshape(-1, 2))
            fmm = _kr_value(ev, (x - E[i] - E[j]).reshape(-1, 2))
            H[i, j] = H[j, i] = (fpp - fpm - fmp + fmm) / (4 * s * s)
    g = (fp - fm) / (2 * s)
    return f0, g, H


def symmetrize_points(pts: np.ndarray, sym) -> np.ndarray:
    """Project a configuration onto the set of configurations invariant under ``sym``."""
    if sym is None:
        return pts
    mats = symmetry_matrices(sym)
    acc = np.zeros_like(pts)
    for M in mats:
        img = pts @ M.T
        # g maps p_i near p_perm[i]; pull back the matched partner
        d = np.hypot(img[:, None, 0] - pts[None, :, 0], img[:, None, 1] - pts[None, :, 1])
        perm = np.argmin(d, axis=1)
        if len(set(perm.tolist())) != len(pts):
            raise GreensError("configuration is not close to a symmetric one")
        acc += pts[perm] @ np.linalg.inv(M).T
    return acc / len(mats)


def kr_critical_search(ev: GreensEvaluator, initial, symmetry=None, max_iter: int = 500,
                       gtol: Optional[float] = None) -> np.ndarray:
    """Damped Newton iteration on ``grad KR = 0`` from ``initial`` (m points).

    With a symmetry tag the iterates are re-projected onto symmetric
    configurations after every step.
    """
    pts = symmetrize_points(np.atleast_2d(np.asarray(initial, dtype=float)).copy(), symmetry)
    min_dist = 4.0 * ev.h
    _check_config(ev, pts, min_dist)
    s = _fd_step(ev)
    diam = ev.mesh.domain.diameter if ev.mesh.domain is not None else 1.0
    gtol = gtol if gtol is not None else 1e-4 / (TWO_PI * diam)
    best = (np.inf, pts.copy())
    stall = 0
    for _ in range(max_iter):
        _, g, H = _kr_hessian(ev, pts, s)
        gn = float(np.linalg.norm(g))
        if gn < best[0] - 1e-12:
            best = (gn, pts.copy())
            stall = 0
        else:
            stall += 1
        if gn <= gtol or stall >= 8:
            break
        try:
            dx = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            dx = g / max(np.abs(np.diag(H)).max(), 1e-12)
        lim = 0.2 * min(diam, min((np.hypot(*(pts[i] - pts[j])) for i in range(len(pts)) for j in range(i)),
                                  default=diam))
        nrm = float(np.linalg.norm(dx))
        if nrm > lim:
            dx *= lim / nrm
        t = 1.0
        accepted = False
        for _ in range(8):
            trial = symmetrize_points(pts + t * dx.reshape(-1, 2), symmetry)
            try:
                _check_config(ev, trial, min_dist)
                _, gt = kirchhoff_routh(ev, trial, s)
            except GreensError:
                t *= 0.5
                continue
            if np.linalg.norm(gt) < gn or t < 0.02:
                pts = trial
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
    gbest, pbest = best
    try:
        _check_config(ev, pbest, min_dist)
    except GreensError as exc:
        if "outside" in str(exc):
            raise GreensError("iteration left the domain") from exc
        raise GreensError("points collided") from exc
    return pbest


def k_field(ev: GreensEvaluator, peaks) -> ScalarField:
    """Limit profile ``K = 8π Σ_j G(., P_j)`` at the vertices, capped within ``h`` of each peak."""
    peaks = np.atleast_2d(np.asarray(peaks, dtype=float))
    ev.check_interior(peaks)
    mesh = ev.mesh
    V = mesh.vertices
    vals = np.zeros(mesh.n_vertices)
    capped = np.zeros(mesh.n_vertices, dtype=bool)
    for P, c in zip(peaks, ev.correctors(peaks)):
        r = np.hypot(*(V - P).T)
        near = r < ev.h
        capped |= near
        vals += 4.0 * np.log(1.0 / np.maximum(r, ev.h)) + 8.0 * math.pi * c
    vals[mesh.boundary] = 0.0
    return ScalarField(mesh, vals, meta={"capped": capped, "peaks": peaks.tolist(), "kind": "K"})
