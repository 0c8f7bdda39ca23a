"""Comparison of computed solutions with the blow-up asymptotics of the Gel'fand problem."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .census import CensusError, local_maxima, radial_monotonicity_check
from .fem import OutOfDomain, ScalarField, assemble, eval_gradients, eval_smooth_values, vertex_fits
from .gelfand import BranchPoint
from .greens import GreensEvaluator, green_eval, k_field, kirchhoff_routh, robin_eval

EIGHT_PI = 8.0 * math.pi


class AsymptoticsError(RuntimeError):
    pass


class Unresolved(AsymptoticsError):
    """The requested scale is below the mesh resolution: refine or raise λ."""


class RegimeViolation(AsymptoticsError):
    pass


@dataclass(frozen=True)
class PeakData:
    """Local maximum ``x_j`` with ``λ e^{u(x_j)} δ_j² = 1`` and ``d_j = δ_j λ^{-1/2}``."""

    location: tuple
    height: float
    delta: float
    d: float

    @classmethod
    def from_height(cls, location, height: float, lam: float) -> "PeakData":
        delta = math.exp(-0.5 * (height + math.log(lam)))
        return cls(location=(float(location[0]), float(location[1])), height=float(height),
                   delta=delta, d=delta / math.sqrt(lam))

    def to_dict(self) -> dict:
        return {"x": self.location[0], "y": self.location[1], "height": self.height,
                "delta": self.delta, "d": self.d}


def liouville_profile(x) -> np.ndarray:
    """``U(x) = log 1/(1 + |x|²/8)²``."""
    x = np.atleast_2d(x)
    return -2.0 * np.log1p(np.sum(x * x, axis=1) / 8.0)


def _fit_peak_location(field: ScalarField, p0, radius: float, min_nodes: int = 12) -> np.ndarray:
    """Stationary point of a least-squares quadratic through the nodes within ``radius`` of ``p0``.

    Averaging over many nodes suppresses the node-to-node discretization
    noise that a single-patch fit passes on to the location.
    """
    mesh = field.mesh
    V = mesh.vertices
    d = V - p0
    near = np.hypot(d[:, 0], d[:, 1]) <= radius
    if np.count_nonzero(near) < min_nodes:
        return np.asarray(p0, dtype=float)
    x, y = (d[near] / radius).T
    A = np.c_[np.ones_like(x), x, y, 0.5 * x * x, x * y, 0.5 * y * y]
    c, *_ = np.linalg.lstsq(A, field.values[near], rcond=None)
    H = np.array([[c[3], c[4]], [c[4], c[5]]])
    if np.any(np.linalg.eigvalsh(H) >= 0):
        return np.asarray(p0, dtype=float)
    step = -np.linalg.solve(H, c[1:3])
    if np.hypot(*step) > 0.5:
        return np.asarray(p0, dtype=float)
    return np.asarray(p0, dtype=float) + radius * step


def extract_peaks(point: BranchPoint, m: Optional[int] = None) -> list:
    """Local maxima of the solution as :class:`PeakData`, highest first (the top ``m`` if given).

    Locations are polished by a least-squares quadratic over the ball of
    radius ``δ/2``; heights come from the smooth reconstruction there.
    """
    pts = local_maxima(point.field)
    if len(pts) == 0:
        raise AsymptoticsError("no local maximum: degenerate field")
    peaks = []
    for p in pts:
        hgt = float(eval_smooth_values(point.field, p[None])[0])
        delta = PeakData.from_height(p, hgt, point.lam).delta
        q = _fit_peak_location(point.field, p, 0.5 * delta)
        try:
            hq = float(eval_smooth_values(point.field, q[None])[0])
        except OutOfDomain:
            q, hq = p, hgt
        peaks.append(PeakData.from_height(q, hq, point.lam))
    peaks.sort(key=lambda q: -q.height)
    return peaks[:m] if m is not None else peaks


def _locs(peaks) -> np.ndarray:
    return np.array([getattr(p, "location", p) for p in peaks], dtype=float).reshape(-1, 2)


def _boundary_distance(mesh, p) -> float:
    B = mesh.vertices[mesh.boundary]
    return float(np.min(np.hypot(*(B - np.asarray(p)).T)))


def peak_radius(mesh, peaks) -> float:
    """Half the smallest pairwise or peak-to-boundary distance, capped at a quarter diameter."""
    P = _locs(peaks)
    cand = [_boundary_distance(mesh, p) for p in P]
    for i in range(len(P)):
        for j in range(i):
            cand.append(float(np.hypot(*(P[i] - P[j]))))
    diam = mesh.domain.diameter if mesh.domain is not None else float(np.ptp(mesh.vertices, axis=0).max())
    return min(0.5 * min(cand), 0.25 * diam)


def mass_checks(point: BranchPoint, peaks, R: float):
    """Total mass ``λ∫e^u``, masses of the balls ``B_R(x_j)`` and the mean-field parameter."""
    mesh = point.field.mesh
    P = _locs(peaks)
    for i in range(len(P)):
        for j in range(i):
            if np.hypot(*(P[i] - P[j])) < 2 * R:
                raise AsymptoticsError("local mass balls overlap")
    _, M = assemble(mesh)
    dens = point.lam * M * np.exp(point.field.values)
    total = float(dens.sum())
    local = [float(dens[np.hypot(*(mesh.vertices - p).T) < R].sum()) for p in P]
    return total, local, total


def _ring_samples(rmin: float, rmax: float, rays: int = 32, radii: int = 16) -> np.ndarray:
    r = np.linspace(rmin, rmax, radii)
    th = 2 * np.pi * np.arange(rays) / rays
    R, T = np.meshgrid(r, th, indexing="ij")
    return np.c_[(R * np.cos(T)).ravel(), (R * np.sin(T)).ravel()]


def profile_deviation(point: BranchPoint, peak: PeakData, Rbar: float = 5.0) -> float:
    """``sup_{|x|≤R̄} |u(δx + x_j) - u(x_j) - U(x)|`` on 32 rays × 16 radii."""
    mesh = point.field.mesh
    c = np.asarray(peak.location)
    h = mesh.local_size(c)
    if Rbar * peak.delta < 5 * h:
        raise Unresolved(f"profile radius {Rbar * peak.delta:.3g} below 5h = {5 * h:.3g}: refine or raise λ")
    x = np.vstack([[0.0, 0.0], _ring_samples(Rbar / 16, Rbar)])
    try:
        vals = eval_smooth_values(point.field, c + peak.delta * x)
    except OutOfDomain as exc:
        raise AsymptoticsError("profile ball leaves the domain") from exc
    return float(np.max(np.abs(vals - peak.height - liouville_profile(x))))


def _expansion_constant(ev: GreensEvaluator, j: int, P: np.ndarray) -> float:
    c = EIGHT_PI * robin_eval(ev, P[j])
    for i in range(len(P)):
        if i != j:
            c += EIGHT_PI * green_eval(ev, P[j], P[i])[0]
    return c


def annulus_deviation(point: BranchPoint, peak: PeakData, all_peaks, ev: GreensEvaluator,
                      r: Optional[float] = None, xi1: float = 0.5, xi2: float = 2.0,
                      rho: Optional[float] = None, strict: bool = True):
    """C⁰ and relative C¹ distance to ``-4log|x-x_j| + 8πR(x_j) + 8πΣG(x_j, x_h)`` on an annulus.

    Returns ``(c0_error, c1_error, regime_ok)``.  The annulus is
    ``ξ₁r ≤ |x - x_j| ≤ ξ₂r`` with ``r = sqrt(δ_j ρ)`` by default.  With
    ``strict`` a violated scale regime (``δ_j/r ≤ 1/5``, ``ξ₂r ≤ ρ/2``)
    raises; otherwise it is reported through ``regime_ok``.
    """
    mesh = point.field.mesh
    P = _locs(all_peaks)
    c = np.asarray(peak.location)
    j = int(np.argmin(np.hypot(*(P - c).T)))
    rho = peak_radius(mesh, P) if rho is None else rho
    r = math.sqrt(peak.delta * rho) if r is None else r
    regime_ok = peak.delta / r <= 0.2 and r * xi2 <= rho / 2
    if strict and not regime_ok:
        raise RegimeViolation(f"δ/r = {peak.delta / r:.3g}, ξ₂r = {r * xi2:.3g}, ρ/2 = {rho / 2:.3g}")
    if r * xi1 < 5 * mesh.local_size(c, radius=r * xi1):
        raise Unresolved("annulus inner radius below five local cells")
    d = _ring_samples(xi1 * r, xi2 * r)
    x = c + d
    try:
        u = eval_smooth_values(point.field, x)
        g = eval_gradients(point.field, x)
    except OutOfDomain as exc:
        raise AsymptoticsError("annulus leaves the domain") from exc
    dist = np.hypot(d[:, 0], d[:, 1])
    const = _expansion_constant(ev, j, P)
    c0 = float(np.max(np.abs(u + 4 * np.log(dist) - const)))
    model = -4 * d / dist[:, None] ** 2
    c1 = float(np.max(np.hypot(*(g - model).T) * dist / 4))
    return c0, c1, bool(regime_ok)


def farfield_deviation(point: BranchPoint, peaks, rho: float, ev: GreensEvaluator):
    """Distance to ``K = 8πΣG(., x_j)`` on ``Ω ∖ ∪B_ρ(x_j)`` and ``‖∇KR‖`` at the peaks."""
    mesh = point.field.mesh
    if ev.mesh is not mesh:
        raise ValueError("evaluator and solution live on different meshes")
    P = _locs(peaks)
    if rho < 10 * mesh.h:
        raise Unresolved(f"ρ = {rho:.3g} below 10h")
    K = k_field(ev, P)
    V = mesh.vertices
    D = np.ones(mesh.n_vertices, dtype=bool)
    for p in P:
        D &= np.hypot(*(V - p).T) >= rho
    diff = ScalarField(mesh, point.field.values - K.values)
    sup = float(np.max(np.abs(diff.values[D])))
    g, _ = vertex_fits(diff)
    gsup = float(np.max(np.hypot(*g[D].T)))
    _, kg = kirchhoff_routh(ev, P)
    return sup, gsup, float(np.linalg.norm(kg))


def _gauss_disk(x0, R: float, delta: float, nr: int, nt: int, inner_scale: Optional[float] = None):
    """Polar quadrature nodes/weights on ``δ ≤ |x-x0| ≤ R`` with geometric panels toward the centre."""
    gx, gw = np.polynomial.legendre.leggauss(nr)
    lo = max(delta, 0.0)
    edges = [R]
    s = inner_scale if inner_scale is not None else R / 64
    while edges[-1] / 2 > max(lo, s):
        edges.append(edges[-1] / 2)
    edges.append(lo)
    edges = edges[::-1]
    rs, ws = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        rs.append(0.5 * (b - a) * gx + 0.5 * (a + b))
        ws.append(0.5 * (b - a) * gw)
    r = np.concatenate(rs)
    w = np.concatenate(ws)
    th = 2 * np.pi * np.arange(nt) / nt
    Rr, T = np.meshgrid(r, th, indexing="ij")
    W = (w[:, None] * r[:, None] * (2 * np.pi / nt)) * np.ones_like(T)
    pts = np.asarray(x0) + np.c_[(Rr * np.cos(T)).ravel(), (Rr * np.sin(T)).ravel()]
    return pts, W.ravel()


def _circle_term(field: ScalarField, lam: float, x0, R: float, n: int, outward: float):
    th = 2 * np.pi * np.arange(n) / n
    nu = np.c_[np.cos(th), np.sin(th)]
    x = np.asarray(x0) + R * nu
    try:
        u = eval_smooth_values(field, x)
        g = eval_gradients(field, x)
    except OutOfDomain as exc:
        raise AsymptoticsError("Pohozaev circle leaves the domain") from exc
    y = x - np.asarray(x0)
    nu = outward * nu
    yg = np.sum(y * g, axis=1)
    dn = np.sum(nu * g, axis=1)
    yn = np.sum(y * nu, axis=1)
    integrand = yg * dn - yn * 0.5 * np.sum(g * g, axis=1) + lam * yn * np.expm1(u)
    return float(np.sum(integrand) * (2 * np.pi * R / n))


def pohozaev_residual(point: BranchPoint, x0, R: float, delta: float = 0.0, samples: int = 512,
                      radial_nodes: int = 12) -> float:
    """``|2λ∫(e^u-1) - ∮[(y·∇u)∂_νu - y·ν|∇u|²/2 + λ y·ν(e^u-1)]|`` with ``y = x - x0``.

    The region is ``B_R(x0)`` or the annulus ``δ < |x - x0| < R``; the
    boundary terms of the inner circle enter with the outward normal of the
    annulus.
    """
    if samples < 256:
        raise ValueError("at least 256 boundary samples")
    if not 0 <= delta < R:
        raise ValueError("need 0 <= delta < R")
    f = point.field
    lam = point.lam
    h = f.mesh.local_size(np.asarray(x0, dtype=float))
    pts, w = _gauss_disk(x0, R, delta, radial_nodes, samples, inner_scale=h / 4)
    try:
        u = eval_smooth_values(f, pts)
    except OutOfDomain as exc:
        raise AsymptoticsError("Pohozaev ball leaves the domain") from exc
    lhs = 2 * lam * float(np.sum(w * np.expm1(u)))
    rhs = _circle_term(f, lam, x0, R, samples, 1.0)
    if delta > 0:
        rhs += _circle_term(f, lam, x0, delta, samples, -1.0)
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# reports


@dataclass
class PeakReport:
    peak: PeakData
    local_mass: float
    profile_sup_error: Optional[float]
    annulus_c0_error: Optional[float]
    annulus_c1_error: Optional[float]
    annulus_regime_ok: Optional[bool]
    monotone_ok: Optional[bool]

    def to_dict(self) -> dict:
        d = self.peak.to_dict()
        d.update({k: v for k, v in asdict(self).items() if k != "peak"})
        return d


@dataclass
class AsymptoticsReport:
    lam: float
    total_mass: float
    per_peak: list
    farfield_sup_error: Optional[float]
    farfield_grad_error: Optional[float]
    kr_gradient_norm: Optional[float]
    rho: float
    notes: list = field(default_factory=list)

    @property
    def mean_field_rho(self) -> float:
        return self.total_mass

    def scalars(self) -> dict:
        """Flat scalar measures for ladder tables (per-peak values reduced by max)."""
        def worst(key):
            vals = [getattr(p, key) for p in self.per_peak if getattr(p, key) is not None]
            return max(vals) if vals else None
        return {"lambda": self.lam, "total_mass": self.total_mass, "mean_field_rho": self.mean_field_rho,
                "min_local_mass": min(p.local_mass for p in self.per_peak),
                "max_local_mass": max(p.local_mass for p in self.per_peak),
                "profile_sup_error": worst("profile_sup_error"),
                "annulus_c0_error": worst("annulus_c0_error"),
                "annulus_c1_error": worst("annulus_c1_error"),
                "farfield_sup_error": self.farfield_sup_error,
                "farfield_grad_error": self.farfield_grad_error,
                "kr_gradient_norm": self.kr_gradient_norm,
                "max_delta": max(p.peak.delta for p in self.per_peak),
                "max_height": max(p.peak.height for p in self.per_peak)}

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "total_mass": self.total_mass, "mean_field_rho": self.mean_field_rho,
                "per_peak": [p.to_dict() for p in self.per_peak],
                "farfield_sup_error": self.farfield_sup_error, "farfield_grad_error": self.farfield_grad_error,
                "kr_gradient_norm": self.kr_gradient_norm, "rho": self.rho, "notes": list(self.notes)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def analyze(point: BranchPoint, m: int, ev: Optional[GreensEvaluator] = None, Rbar: float = 5.0,
            strict: bool = False) -> AsymptoticsReport:
    """All asymptotic measures for an ``m``-peak solution."""
    mesh = point.field.mesh
    ev = ev if ev is not None else GreensEvaluator(mesh)
    peaks = extract_peaks(point, m)
    P = _locs(peaks)
    rho = peak_radius(mesh, P)
    total, local, _ = mass_checks(point, P, rho)
    notes = []
    per = []
    for pk, lm in zip(peaks, local):
        try:
            prof = profile_deviation(point, pk, Rbar)
        except AsymptoticsError as exc:
            prof = None
            notes.append(str(exc))
        try:
            c0, c1, reg = annulus_deviation(point, pk, P, ev, rho=rho, strict=strict)
        except AsymptoticsError as exc:
            c0 = c1 = reg = None
            notes.append(str(exc))
        try:
            mono, _ = radial_monotonicity_check(point.field, pk, rho)
        except (ValueError, CensusError) as exc:
            mono = None
            notes.append(str(exc))
        per.append(PeakReport(pk, lm, prof, c0, c1, reg, mono))
    try:
        ff, fg, kr = farfield_deviation(point, P, rho, ev)
    except AsymptoticsError as exc:
        ff = fg = None
        _, kg = kirchhoff_routh(ev, P)
        kr = float(np.linalg.norm(kg))
        notes.append(str(exc))
    return AsymptoticsReport(point.lam, total, per, ff, fg, kr, rho, notes)


LADDER_COLUMNS = ["scenario", "lambda", "total_mass", "mean_field_rho", "min_local_mass", "max_local_mass",
                  "profile_sup_error", "annulus_c0_error", "annulus_c1_error", "farfield_sup_error",
                  "farfield_grad_error", "kr_gradient_norm", "max_delta", "max_height"]


def ladder_csv(rows: Sequence[tuple]) -> str:
    """CSV with one row per ``(scenario, λ)``; ``rows`` holds ``(scenario, AsymptoticsReport)`` pairs."""
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=LADDER_COLUMNS, lineterminator="\n")
    w.writeheader()
    for name, rep in rows:
        d = rep.scalars()
        d["scenario"] = name
        w.writerow({k: ("" if d.get(k) is None else (f"{d[k]:.10g}" if isinstance(d[k], float) else d[k]))
                    for k in LADDER_COLUMNS})
    return buf.getvalue()
