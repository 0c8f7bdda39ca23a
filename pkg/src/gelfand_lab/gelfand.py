"""Solver for -Δu = λe^u, u = 0 on the boundary.

Discrete problem: ``F(u) = K u - λ M e^u`` on interior vertices (P1
stiffness ``K``, lumped mass ``M``, nodal exponential).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as spla

from .fem import ScalarField, assemble, eval_smooth_values, harmonic_solve_many
from .geometry import Mesh

log = logging.getLogger(__name__)

EXP_CAP = 700.0


class SolverError(RuntimeError):
    pass


class NewtonDivergence(SolverError):
    pass


class ExpOverflow(SolverError):
    """Nodal values beyond the exponential range: a better initial guess is needed."""


class ContinuationFailure(SolverError):
    pass


class AnsatzError(SolverError):
    pass


class FoldProximity(SolverError):
    pass


@dataclass(frozen=True, eq=False)
class BranchPoint:
    lam: float
    field: ScalarField
    arclength: float = 0.0
    newton_iters: int = 0
    residual_norm: float = 0.0

    @property
    def sup_norm(self) -> float:
        return float(np.max(self.field.values))

    @property
    def mass(self) -> float:
        _, M = assemble(self.field.mesh)
        return float(self.lam * np.dot(M, np.exp(self.field.values)))

    def summary(self) -> dict:
        return {"lambda": self.lam, "arclength": self.arclength, "sup_norm": self.sup_norm,
                "mass": self.mass, "residual_norm": self.residual_norm,
                "newton_iters": self.newton_iters}


@dataclass
class Branch:
    points: list = field(default_factory=list)
    fold_lambda: Optional[float] = None
    fold_index: Optional[int] = None

    def lambdas(self) -> np.ndarray:
        return np.array([p.lam for p in self.points])

    def sup_norms(self) -> np.ndarray:
        return np.array([p.sup_norm for p in self.points])

    def to_jsonl(self, field_ref: Optional[str] = None) -> str:
        lines = []
        for i, p in enumerate(self.points):
            rec = p.summary()
            rec.pop("newton_iters")
            rec["field_ref"] = f"{field_ref}#{i}" if field_ref else None
            lines.append(json.dumps(rec, sort_keys=True))
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Newton


def _blocks(mesh: Mesh):
    def make():
        K, M = assemble(mesh)
        I = np.flatnonzero(mesh.interior)
        return I, K[I][:, I].tocsr(), M[I]
    return mesh.cached("gelfand_blocks", make)


def residual(mesh: Mesh, lam: float, u: np.ndarray) -> np.ndarray:
    I, KII, MI = _blocks(mesh)
    uI = u[I]
    return KII @ uI - lam * MI * np.exp(uI)


def newton_solve(mesh: Mesh, lam: float, u0, tol: float = 1e-10, max_iter: int = 50,
                 symmetric: bool = False) -> BranchPoint:
    """Damped Newton for the discrete Gel'fand problem at fixed ``lam``."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    I, KII, MI = _blocks(mesh)
    u = np.array(u0.values if isinstance(u0, ScalarField) else u0, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("initial guess must be finite")
    u[mesh.boundary] = 0.0
    if symmetric:
        u = mesh.symmetrize(u)
    lamM = lam * MI

    def target(v):
        # relative to the size of the source term, which grows with the peak height
        return tol * max(np.linalg.norm(lamM), np.linalg.norm(lamM * np.exp(np.minimum(v[I], EXP_CAP))))

    def res(v):
        if np.max(v[I]) > EXP_CAP:
            raise ExpOverflow(f"nodal value {np.max(v):.1f} exceeds {EXP_CAP}")
        return KII @ v[I] - lam * MI * np.exp(v[I])

    F = res(u)
    rn = float(np.linalg.norm(F))
    growth = 0
    it = 0
    while rn > target(u):
        if it >= max_iter:
            raise NewtonDivergence(f"no convergence in {max_iter} iterations (residual {rn:.3e})")
        it += 1
        J = (KII - sparse.diags(lam * MI * np.exp(u[I]))).tocsc()
        du = spla.splu(J).solve(-F)
        trial, Ft, rt = None, None, np.inf
        full = None
        t = 1.0
        while t >= 1 / 64:
            cand = u.copy()
            cand[I] += t * du
            if symmetric:
                cand = mesh.symmetrize(cand)
            try:
                Fc = res(cand)
                rc = float(np.linalg.norm(Fc))
            except ExpOverflow:
                Fc, rc = None, np.inf
            if full is None and np.isfinite(rc):
                full = (cand, Fc, rc)
            if rc < (1 - 1e-4 * t) * rn:
                trial, Ft, rt = cand, Fc, rc
                break
            t *= 0.5
        if trial is None:
            # no sufficient decrease: take the longest finite step along the Newton direction
            if full is None:
                raise ExpOverflow("Newton step overflowed the exponential")
            trial, Ft, rt = full
        if not np.isfinite(rt):
            raise ExpOverflow("Newton step overflowed the exponential")
        growth = growth + 1 if rt > rn else 0
        if growth >= 3:
            raise NewtonDivergence("residual grew in 3 consecutive steps")
        u, F, rn = trial, Ft, rt
    return BranchPoint(lam=float(lam), field=ScalarField(mesh, u), newton_iters=it, residual_norm=rn)


def minimal_solution(mesh: Mesh, lam: float) -> BranchPoint:
    return newton_solve(mesh, lam, np.zeros(mesh.n_vertices))


# ---------------------------------------------------------------------------
# continuation


def dirichlet_eigenvalue(mesh: Mesh) -> float:
    """Smallest Dirichlet eigenvalue of the Laplacian on the mesh."""
    I, KII, MI = _blocks(mesh)
    vals = spla.eigsh(KII.tocsc(), k=1, M=sparse.diags(MI).tocsc(), sigma=0.0, which="LM",
                      return_eigenvectors=False)
    return float(vals[0])


UNIT_DISK_EIGENVALUE = 5.783185962946784  # square of the first zero of J0


def continuation(mesh: Mesh, ds: float = 0.05, lambda_start: float = 0.05, max_points: int = 400,
                 lambda_min: Optional[float] = None, ds_min: float = 1e-3, ds_max: float = 1e-1,
                 tol: float = 1e-10, lambda_ref: Optional[float] = None) -> Branch:
    """Pseudo-arclength continuation from the minimal branch through the fold.

    The arclength norm is the mean-square norm of ``u`` plus ``(λ/λ_ref)²``
    where ``λ_ref`` defaults to the first Dirichlet eigenvalue relative to
    the unit disk's, so the unit disk uses ``λ`` itself.  Stops after
    ``max_points`` points or once ``λ <= lambda_min`` past the fold.
    """
    if not ds > 0:
        raise ValueError("ds must be positive")
    lambda_min = lambda_start if lambda_min is None else lambda_min
    if lambda_ref is None:
        lambda_ref = dirichlet_eigenvalue(mesh) / UNIT_DISK_EIGENVALUE
    I, KII, MI = _blocks(mesh)
    area = MI.sum()
    W = MI / area
    wl = 1.0 / lambda_ref ** 2

    def inner(a, b):
        return float(np.dot(W * a[:-1], b[:-1]) + wl * a[-1] * b[-1])

    def norm(a):
        return math.sqrt(inner(a, a))

    p0 = minimal_solution(mesh, lambda_start)
    x = np.r_[p0.field.values[I], lambda_start]
    e = np.exp(x[:-1])
    J = (KII - sparse.diags(lambda_start * MI * e)).tocsc()
    dudl = spla.splu(J).solve(MI * e)
    t = np.r_[dudl, 1.0]
    t /= norm(t)

    branch = Branch(points=[BranchPoint(lam=lambda_start, field=p0.field, arclength=0.0,
                                        newton_iters=p0.newton_iters, residual_norm=p0.residual_norm)])
    s_acc = 0.0
    ds = min(max(ds, ds_min), ds_max)
    turned = False
    lam_max = lambda_start
    while len(branch.points) < max_points:
        halvings = 0
        while True:
            pred = x + ds * t
            y = pred.copy()
            ok = False
            for it in range(1, 9):
                u, lam = y[:-1], y[-1]
                if np.max(u) > EXP_CAP:
                    break
                eu = np.exp(u)
                F = KII @ u - lam * MI * eu
                N = inner(t, y - pred)
                rn = float(np.linalg.norm(F))
                src = max(np.linalg.norm(lam * MI), np.linalg.norm(lam * MI * eu))
                if rn <= tol * src and abs(N) <= 1e-12 * max(1.0, norm(y)):
                    ok = True
                    break
                J = KII - sparse.diags(lam * MI * eu)
                col = sparse.csc_matrix((-MI * eu)[:, None])
                row = sparse.csr_matrix((W * t[:-1])[None, :])
                A = sparse.bmat([[J, col], [row, np.array([[wl * t[-1]]])]], format="csc")
                dy = spla.splu(A).solve(-np.r_[F, N])
                y = y + dy
                if not np.all(np.isfinite(y)):
                    break
            if ok:
                break
            halvings += 1
            if halvings > 3:
                raise ContinuationFailure(f"corrector failed after 3 step halvings at λ={x[-1]:.4g}")
            ds *= 0.5
        step = norm(y - x)
        s_acc += step
        t_new = (y - x) / step
        if inner(t_new, t) < 0:
            t_new = -t_new
        x, t = y, t_new
        lam = float(x[-1])
        full = np.zeros(mesh.n_vertices)
        full[I] = x[:-1]
        branch.points.append(BranchPoint(lam=lam, field=ScalarField(mesh, full), arclength=s_acc,
                                         newton_iters=it, residual_norm=rn))
        if lam > lam_max:
            lam_max = lam
        elif not turned and lam < lam_max:
            turned = True
            lams = branch.lambdas()
            branch.fold_index = int(np.argmax(lams))
            branch.fold_lambda = float(lams.max())
            log.info("fold passed near λ=%.5f", branch.fold_lambda)
        if turned and lam <= lambda_min:
            break
        # shorter steps near the fold so that λ* is sampled finely
        near_fold = abs(t[-1]) / lambda_ref < 0.2 and not turned
        cap = min(ds_max, 0.02) if near_fold else ds_max
        if it <= 3:
            ds = min(ds * 1.5, cap)
        elif it >= 6:
            ds = max(ds * 0.7, ds_min)
        ds = max(min(ds, cap), ds_min)
    if turned:
        branch.fold_lambda = float(branch.lambdas().max())
    return branch


def fold_estimate(branch: Branch) -> Optional[float]:
    """Parabolic refinement of the fold value from the three points around the maximum."""
    if branch.fold_index is None:
        return None
    i = branch.fold_index
    if i == 0 or i + 1 >= len(branch.points):
        return branch.fold_lambda
    s = np.array([branch.points[j].arclength for j in (i - 1, i, i + 1)])
    lam = np.array([branch.points[j].lam for j in (i - 1, i, i + 1)])
    c = np.polyfit(s - s[1], lam, 2)
    if c[0] >= 0:
        return branch.fold_lambda
    return float(c[2] - c[1] ** 2 / (4 * c[0]))


def upper_branch_solution(branch: Branch, lam: float) -> BranchPoint:
    """Newton solve at ``lam`` on the upper branch, started from interpolated branch points."""
    if branch.fold_index is None:
        raise SolverError("branch has not turned at a fold")
    pts = branch.points[branch.fold_index:]
    for a, b in zip(pts[:-1], pts[1:]):
        if (a.lam - lam) * (b.lam - lam) <= 0:
            w = 0.0 if a.lam == b.lam else (a.lam - lam) / (a.lam - b.lam)
            u0 = (1 - w) * a.field.values + w * b.field.values
            p = newton_solve(a.field.mesh, lam, u0)
            return BranchPoint(lam=p.lam, field=p.field, arclength=a.arclength + w * (b.arclength - a.arclength),
                               newton_iters=p.newton_iters, residual_norm=p.residual_norm)
    raise SolverError(f"λ={lam} not bracketed on the upper branch")


def minimal_branch_solution(branch: Branch, lam: float) -> BranchPoint:
    end = branch.fold_index if branch.fold_index is not None else len(branch.points) - 1
    pts = branch.points[:end + 1]
    for a, b in zip(pts[:-1], pts[1:]):
        if (a.lam - lam) * (b.lam - lam) <= 0:
            w = 0.0 if a.lam == b.lam else (a.lam - lam) / (a.lam - b.lam)
            u0 = (1 - w) * a.field.values + w * b.field.values
            return newton_solve(a.field.mesh, lam, u0)
    raise SolverError(f"λ={lam} not bracketed on the minimal branch")


# ---------------------------------------------------------------------------
# multi-peak seeding


def bubble_ansatz(ev, peaks, lam: float, iterations: int = 10) -> ScalarField:
    """Sum of projected Liouville bubbles centred at ``peaks``.

    Each bubble ``-2 log(μ_j² + |x-P_j|²)`` is corrected by the harmonic
    extension of its boundary trace, so the sum vanishes on the boundary.
    The bubble scale ``μ_j`` relates to the peak scale ``δ_j`` of
    ``λ e^{u(P_j)} δ_j² = 1`` by ``δ_j = μ_j / √8``; the size checks
    (``δ_j < dist(P_j, ∂Ω)/10``, ``δ_i + δ_j < |P_i - P_j|/4``) use ``δ_j``.
    The scales ``μ_j`` solve the matching condition
    ``log(8μ_j²/λ) = (value of the other terms at P_j)`` by fixed-point iteration,
    started from the far-field form ``8πR(P_j) + 8π Σ_{i≠j} G(P_j, P_i)``.
    """
    from .greens import green_eval, robin_eval

    if not lam > 0:
        raise ValueError("lambda must be positive")
    mesh = ev.mesh
    P = np.atleast_2d(np.asarray(peaks, dtype=float))
    ev.check_interior(P)
    m = len(P)
    V = mesh.vertices
    B = np.flatnonzero(mesh.boundary)
    dist_b = np.array([np.min(np.hypot(*(V[B] - p).T)) for p in P])

    rhs = np.array([8 * math.pi * robin_eval(ev, P[j])
                    + sum(8 * math.pi * green_eval(ev, P[j], P[i])[0] for i in range(m) if i != j)
                    for j in range(m)])
    mu2 = lam / 8.0 * np.exp(rhs)

    def parts(mu2):
        traces = np.stack([2.0 * np.log(mu2[j] + np.sum((V[B] - P[j]) ** 2, axis=1)) for j in range(m)], axis=1)
        hj = harmonic_solve_many(mesh, traces)
        cols = [-2.0 * np.log(mu2[j] + np.sum((V - P[j]) ** 2, axis=1)) + hj[:, j] for j in range(m)]
        return hj, np.stack(cols, axis=1)

    for _ in range(iterations):
        if not np.all(np.isfinite(mu2)) or np.any(np.sqrt(mu2 / 8) > dist_b / 10):
            raise AnsatzError("bubble scale fixed point diverged; λ too large for this configuration")
        hj, PU = parts(mu2)
        new = np.empty(m)
        for j in range(m):
            hval = eval_smooth_values(ScalarField(mesh, hj[:, j]), P[j:j + 1])[0]
            others = sum(eval_smooth_values(ScalarField(mesh, PU[:, i]), P[j:j + 1])[0]
                         for i in range(m) if i != j)
            new[j] = lam / 8.0 * math.exp(hval + others)
        mu2 = new
    if not np.all(np.isfinite(mu2)) or np.any(np.sqrt(mu2 / 8) > dist_b / 10):
        raise AnsatzError("bubble scale fixed point diverged; λ too large for this configuration")
    mu = np.sqrt(mu2)
    delta = mu / math.sqrt(8.0)
    for i in range(m):
        for j in range(i):
            if delta[i] + delta[j] > np.hypot(*(P[i] - P[j])) / 4:
                raise AnsatzError("bubbles overlap")
    _, PU = parts(mu2)
    u0 = PU.sum(axis=1)
    u0[mesh.boundary] = 0.0
    return ScalarField(mesh, u0, meta={"mu": mu.tolist(), "peaks": P.tolist()})


def solve_multipeak(ev, peaks_init, lam: float, symmetry: Optional[bool] = None, tol: float = 1e-10,
                    max_shift: Optional[float] = None) -> BranchPoint:
    """Ansatz plus Newton for an m-peak solution near ``peaks_init``."""
    from .census import local_maxima

    mesh = ev.mesh
    P = np.atleast_2d(np.asarray(peaks_init, dtype=float))
    u0 = bubble_ansatz(ev, P, lam)
    sym = bool(symmetry) and mesh.symmetry is not None
    try:
        pt = newton_solve(mesh, lam, u0, tol=tol, symmetric=sym)
    except (NewtonDivergence, ExpOverflow) as exc:
        raise NewtonDivergence(f"λ={lam} too large for this {len(P)}-peak branch at h={mesh.h}: {exc}") from exc
    found = local_maxima(pt.field)
    max_shift = 5 * mesh.h if max_shift is None else max_shift
    for p in P:
        if len(found) == 0 or np.min(np.hypot(*(found - p).T)) > max_shift:
            raise SolverError(f"solution lost the peak near {p.tolist()}")
    return pt


# ---------------------------------------------------------------------------
# linearisation


@dataclass(frozen=True)
class EigenEstimate:
    mu_min: float
    scale: float

    @property
    def nondegenerate(self) -> bool:
        return abs(self.mu_min) >= 1e-6 * self.scale


def linearized_eigen(point: BranchPoint) -> EigenEstimate:
    """Smallest-magnitude eigenvalue of ``K - λ diag(M e^u)`` relative to the lumped mass."""
    mesh = point.field.mesh
    I, KII, MI = _blocks(mesh)
    A = (KII - sparse.diags(point.lam * MI * np.exp(point.field.values[I]))).tocsc()
    Mm = sparse.diags(MI).tocsc()
    scale = float(np.max(KII.diagonal() / MI))
    try:
        vals = spla.eigsh(A, k=1, M=Mm, sigma=0.0, which="LM", return_eigenvectors=False, tol=1e-10)
    except RuntimeError as exc:
        raise FoldProximity(f"linearisation is numerically singular: {exc}") from exc
    return EigenEstimate(mu_min=float(vals[0]), scale=scale)
