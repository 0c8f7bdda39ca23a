"""Named experiments: build a domain, solve along a λ ladder, audit critical points and asymptotics."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .asymptotics import AsymptoticsError, AsymptoticsReport, analyze, ladder_csv, pohozaev_residual
from .census import CensusError, CensusReport, am_identity_check, census
from .fem import OutOfDomain, ScalarField, eval_values, vertex_fits
from .gelfand import (BranchPoint, SolverError, bubble_ansatz, continuation, fold_estimate, newton_solve,
                      solve_multipeak, upper_branch_solution)
from .geometry import (GeometryError, Mesh, _hub_centers, build_domain, mesh_hash, refine, triangulate,
                       write_mesh)
from .greens import GreensError, GreensEvaluator, k_field, kr_critical_search

SCENARIOS = ("thm-a", "thm-b", "thm-c", "dumbbell-mk", "hub", "hub-punctured", "am-identity", "disk-oracle")
EIGHT_PI = 8.0 * math.pi
# ‖∇KR‖ is a central difference of numerically harmonic correctors; changes below this are noise
KR_TREND_SLACK = 1e-4


class ScenarioError(ValueError):
    pass


@dataclass
class Expected:
    """Expected census: exact ``count`` or a ``lower_bound``, with kind counts of the same mode."""

    m: int
    k: int
    count: Optional[int] = None
    lower_bound: Optional[int] = None
    maxima: Optional[int] = None
    saddles: Optional[int] = None
    index_sum: Optional[int] = None

    def __post_init__(self):
        if self.index_sum is None:
            self.index_sum = 1 - self.k
        if self.index_sum != 1 - self.k:
            raise ScenarioError(f"expected index sum {self.index_sum} contradicts 1 - k = {1 - self.k}")
        if self.count is not None and self.lower_bound is not None:
            raise ScenarioError("give either an exact count or a lower bound")
        if self.count is not None and None not in (self.maxima, self.saddles):
            if self.maxima + self.saddles != self.count:
                raise ScenarioError("maxima + saddles must equal the exact count")


@dataclass
class ScenarioConfig:
    """One experiment.

    ``grading = (factor, radius_factor, exponent[, slope, slope_exponent])``
    sets the per-rung peak refinement: local size ``factor·μ·(μ/μ₀)^exponent``
    within ``radius_factor·μ`` of each peak, growing outside with slope
    ``slope·(μ/μ₀)^slope_exponent`` (default 0.3 and 1), where ``μ`` is the
    bubble scale at that rung and ``μ₀`` the one at the first rung.  ``verdict_rung`` is ``"every"``
    (all resolved rungs must match) or ``"smallest"`` (the smallest
    resolvable λ decides).
    """

    name: str
    domain: str
    params: dict
    h: Optional[float]
    ladder: list
    symmetry: Optional[str]
    expected: Expected
    label: str = ""
    initial_peaks: list = field(default_factory=list)
    grading: tuple = (0.1, 2.2, 1.0, 0.3, 1.0)
    extra_spots: list = field(default_factory=list)
    verdict_rung: str = "every"
    trends: bool = False
    options: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in SCENARIOS:
            raise ScenarioError(f"unknown scenario {self.name!r}; choose from {', '.join(SCENARIOS)}")
        if isinstance(self.expected, dict):
            self.expected = Expected(**self.expected)
        self.ladder = [float(x) for x in self.ladder]
        if any(not x > 0 for x in self.ladder):
            raise ScenarioError("ladder values must be positive")
        if self.verdict_rung not in ("every", "smallest"):
            raise ScenarioError("verdict_rung must be 'every' or 'smallest'")
        self.grading = tuple(float(x) for x in self.grading)
        self.label = self.label or self.name

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grading"] = list(self.grading)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def load_config(path) -> ScenarioConfig:
    with open(path) as f:
        return ScenarioConfig.from_dict(json.load(f))


def _ladder(scale: float) -> list:
    return [round(scale * x, 6) for x in (0.2, 0.1, 0.05)]


def default_configs(name: str) -> list:
    """Frozen configurations of the named scenario (several for families)."""
    if name == "thm-a":
        return [ScenarioConfig("thm-a", "disk", {}, None, _ladder(1.0), "reflect",
                               Expected(m=1, k=0, count=1, maxima=1, saddles=0),
                               initial_peaks=[[0.0, 0.0]], trends=True)]
    if name == "thm-b":
        return [ScenarioConfig("thm-b", "dumbbell", {"m": 2, "eps": 0.15}, 0.045, _ladder(1.0), "reflect",
                               Expected(m=2, k=0, count=3, maxima=2, saddles=1),
                               initial_peaks=[[-1.3, 0.0], [1.3, 0.0]], verdict_rung="smallest", trends=True)]
    if name == "thm-c":
        return [ScenarioConfig("thm-c", "disk_with_holes", {"holes": [[0.4, 0.0, 0.15]]}, 0.025, _ladder(1.5),
                               "reflect", Expected(m=1, k=1, count=2, maxima=1, saddles=1),
                               initial_peaks=[[-0.4, 0.0]], trends=True)]
    if name == "dumbbell-mk":
        return [ScenarioConfig("dumbbell-mk", "dumbbell", {"m": 3, "eps": 0.15}, None, _ladder(1.0), "reflect",
                               Expected(m=3, k=0, count=5, maxima=3, saddles=2),
                               label="dumbbell-mk/m3k0", initial_peaks=[[-2.6, 0.0], [0.0, 0.0], [2.6, 0.0]]),
                ScenarioConfig("dumbbell-mk", "dumbbell", {"m": 2, "eps": 0.15, "handles": 1}, None, _ladder(1.0),
                               "reflect", Expected(m=2, k=1, count=4, maxima=2, saddles=2),
                               label="dumbbell-mk/m2k1", initial_peaks=[[-1.3, 0.0], [1.3, 0.0]])]
    if name in ("hub", "hub-punctured"):
        h = 0.0125
        centers, _ = _hub_centers(3, 1.0)
        base = dict(domain="hub", params={"m": 3, "eps": 0.1, "radius": 0.2}, h=h, ladder=_ladder(23.0),
                    symmetry="rotate", initial_peaks=np.round(centers, 12).tolist(), grading=(0.1, 1.0, 0.0, 0.3, 0.0),
                    extra_spots=[[0.0, 0.0, h / 3, 0.1]], verdict_rung="smallest")
        if name == "hub":
            return [ScenarioConfig("hub", expected=Expected(m=3, k=0, lower_bound=7, maxima=4, saddles=3),
                                   options={"k_field_rho": 0.1}, **base)]
        base["verdict_rung"] = "every"
        return [ScenarioConfig("hub-punctured", expected=Expected(m=3, k=1, lower_bound=8, maxima=4, saddles=4),
                               options={"puncture": [0.16, 0.577, 0.015]}, **base)]
    if name == "am-identity":
        cases = [("N2", "annulus", {"inner_radius": 0.4}, [0.0, 1.0]),
                 ("N3", "disk_with_holes", {"holes": [[-0.4, 0.0, 0.15], [0.4, 0.0, 0.15]]}, [0.0, 1.0, 1.0]),
                 ("N4", "disk_with_holes", {"holes": [[-0.45, 0.0, 0.12], [0.3, 0.35, 0.12], [0.3, -0.35, 0.12]]},
                  [0.0, 1.0, 1.0, 1.0])]
        out = []
        for tag, kind, params, values in cases:
            n = len(values)
            out.append(ScenarioConfig("am-identity", kind, params, 0.03, [], None,
                                      Expected(m=0, k=n - 1), label=f"am-identity/{tag}",
                                      options={"values": values}))
        return out
    if name == "disk-oracle":
        return [ScenarioConfig("disk-oracle", "disk", {}, 0.02, [0.2], "reflect",
                               Expected(m=1, k=0, count=1, maxima=1, saddles=0), initial_peaks=[[0.0, 0.0]],
                               options={"pohozaev": {"x0": [0.0, 0.0], "R": 0.5, "delta": 0.0,
                                                     "spot_factor": 0.2, "spot_radius": 0.3}})]
    raise ScenarioError(f"unknown scenario {name!r}; choose from {', '.join(SCENARIOS)}")


# ---------------------------------------------------------------------------
# results


@dataclass
class RungResult:
    lam: Optional[float]
    resolved: bool
    reason: str = ""
    point: Optional[dict] = None
    census: Optional[CensusReport] = None
    asymptotics: Optional[AsymptoticsReport] = None
    extras: dict = field(default_factory=dict)
    mesh_vertices: int = 0
    mesh_hash: str = ""
    # in-memory only: the solved field and peak balls for rendering
    field: Optional[ScalarField] = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {"lambda": self.lam, "resolved": self.resolved, "reason": self.reason, "point": self.point,
                "census": self.census.to_dict() if self.census is not None else None,
                "census_valid": self.census.valid if self.census is not None else None,
                "census_notes": list(self.census.notes) if self.census is not None else None,
                "asymptotics": self.asymptotics.to_dict() if self.asymptotics is not None else None,
                "extras": self.extras, "mesh_vertices": self.mesh_vertices, "mesh_hash": self.mesh_hash}


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    rungs: list
    verdicts: dict
    extras: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    timing: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.verdicts) and all(v["pass"] for v in self.verdicts.values())

    def to_dict(self) -> dict:
        return _canonical({"config": self.config.to_dict(), "rungs": [r.to_dict() for r in self.rungs],
                           "verdicts": self.verdicts, "passed": self.passed, "extras": self.extras,
                           "artifacts": sorted(self.artifacts)})

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"


def _canonical(obj):
    """JSON-ready copy with floats rounded to 12 significant digits (stable across BLAS builds)."""
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            return None
        return float(f"{v:.12g}")
    if isinstance(obj, np.ndarray):
        return _canonical(obj.tolist())
    return obj


def _verdict(ok: bool, **detail) -> dict:
    return {"pass": bool(ok), **detail}


# ---------------------------------------------------------------------------
# pipeline pieces


def _spec(cfg: ScenarioConfig, extra_params: Optional[dict] = None):
    params = dict(cfg.params)
    params.update(extra_params or {})
    return build_domain(cfg.domain, params)


def _base_mesh(spec, h, extra_spots=()):
    return triangulate(spec, h=h, refine=[tuple(s) for s in extra_spots])


def kr_peaks(cfg: ScenarioConfig, ev: GreensEvaluator) -> np.ndarray:
    """Critical configuration of the Kirchhoff-Routh function near the configured initial peaks."""
    sym = ev.mesh.domain.symmetry if cfg.symmetry else None
    return kr_critical_search(ev, cfg.initial_peaks, symmetry=sym)


def _bubble_scales(ev, P, lam) -> list:
    return bubble_ansatz(ev, P, lam).meta["mu"]


def _rung_mesh(cfg, spec, P, mus, mu0, h):
    fac, rad, expo, slope, slope_expo = (tuple(cfg.grading) + (0.3, 1.0)[len(cfg.grading) - 3:])[:5]
    spots = [(float(x), float(y), fac * mu * (mu / mu0) ** expo, rad * mu) for (x, y), mu in zip(P, mus)]
    spots += [tuple(s) for s in cfg.extra_spots]
    return triangulate(spec, h=h, refine=spots, grading=slope * (max(mus) / mu0) ** slope_expo)


def _point_summary(p: BranchPoint) -> dict:
    s = p.summary()
    return {k: s[k] for k in sorted(s)}


def _solve_and_audit(cfg, spec, P, lam, mus, mu0, h, symmetric, m_peaks):
    mesh = _rung_mesh(cfg, spec, P, mus, mu0, h)
    ev = GreensEvaluator(mesh)
    p = solve_multipeak(ev, P, lam, symmetry=symmetric)
    rep = census(p.field)
    try:
        asy = analyze(p, m_peaks, ev) if m_peaks > 0 else None
    except (AsymptoticsError, GreensError, OutOfDomain) as exc:
        asy = None
        rep.notes.append(f"asymptotics unavailable: {exc}")
    return mesh, p, rep, asy


_FAILURES = (SolverError, CensusError, GeometryError, GreensError, OutOfDomain, np.linalg.LinAlgError)


def _peak_rungs(cfg: ScenarioConfig, h: Optional[float]):
    spec = _spec(cfg)
    base = _base_mesh(spec, h, cfg.extra_spots)
    h = base.h
    ev0 = GreensEvaluator(base)
    P = kr_peaks(cfg, ev0)
    extras = {"kr_peaks": P.tolist(), "h": h, "k": spec.k}
    symmetric = cfg.symmetry is not None
    rungs = []
    mu0 = None
    for lam in cfg.ladder:
        try:
            mus = _bubble_scales(ev0, P, lam)
            mu0 = max(mus) if mu0 is None else mu0
            mesh, p, rep, asy = _solve_and_audit(cfg, spec, P, lam, mus, mu0, h, symmetric, cfg.expected.m)
        except _FAILURES as exc:
            rungs.append(RungResult(lam, False, reason=f"{type(exc).__name__}: {exc}"))
            continue
        rungs.append(RungResult(lam, True, point=_point_summary(p), census=rep, asymptotics=asy,
                                extras={"bubble_scales": list(mus)}, mesh_vertices=mesh.n_vertices,
                                mesh_hash=mesh_hash(mesh), field=p.field))
    return spec, base, ev0, P, rungs, extras


def _census_matches(rep: CensusReport, exp: Expected) -> tuple:
    c = rep.counts
    nmax, nsad = c["maxima"], c["saddles"]
    problems = []
    if not rep.valid:
        problems.append("census invalid: " + "; ".join(rep.notes))
    if rep.index_sum != exp.index_sum:
        problems.append(f"index sum {rep.index_sum} != {exp.index_sum}")
    if exp.count is not None:
        if rep.total != exp.count:
            problems.append(f"count {rep.total} != {exp.count}")
        if exp.maxima is not None and nmax != exp.maxima:
            problems.append(f"maxima {nmax} != {exp.maxima}")
        if exp.saddles is not None and nsad != exp.saddles:
            problems.append(f"saddles {nsad} != {exp.saddles}")
        if any(not q.nondegenerate for q in rep.points):
            problems.append("degenerate critical point")
    else:
        if exp.lower_bound is not None and rep.total < exp.lower_bound:
            problems.append(f"count {rep.total} < {exp.lower_bound}")
        if exp.maxima is not None and nmax < exp.maxima:
            problems.append(f"maxima {nmax} < {exp.maxima}")
        if exp.saddles is not None and nsad < exp.saddles:
            problems.append(f"saddles {nsad} < {exp.saddles}")
    return not problems, problems


def _resolvable(r: RungResult) -> bool:
    return r.resolved and r.census is not None and r.census.valid and \
        all(q.nondegenerate for q in r.census.points)


def _decisive_rungs(cfg: ScenarioConfig, rungs: Sequence[RungResult]) -> list:
    resolved = [r for r in rungs if r.resolved]
    if cfg.verdict_rung == "every":
        return resolved
    ok = [r for r in resolved if _resolvable(r)]
    return [min(ok, key=lambda r: r.lam)] if ok else []


def _census_verdict(cfg, rungs) -> dict:
    decisive = _decisive_rungs(cfg, rungs)
    if not decisive:
        return _verdict(False, reason="no resolved rung")
    per = {}
    for r in decisive:
        ok, problems = _census_matches(r.census, cfg.expected)
        per[f"{r.lam:g}"] = {"pass": ok, "counts": r.census.counts, "index_sum": r.census.index_sum,
                             "problems": problems}
    return _verdict(all(v["pass"] for v in per.values()), mode=cfg.verdict_rung, rungs=per)


def _poincare_hopf_verdict(cfg, rungs) -> dict:
    res = [r for r in rungs if r.resolved and r.census is not None and r.census.valid]
    if not res:
        return _verdict(False, reason="no resolved rung with a valid census")
    sums = {f"{r.lam:g}" if r.lam is not None else "harmonic": r.census.index_sum for r in res}
    return _verdict(all(s == cfg.expected.index_sum for s in sums.values()), expected=cfg.expected.index_sum,
                    index_sums=sums)


def trend_checks(reports: Sequence[AsymptoticsReport], m: int, kr_slack: float = KR_TREND_SLACK) -> dict:
    """Monotone-trend verdicts over a ladder ordered by decreasing λ."""
    reps = sorted(reports, key=lambda r: -r.lam)
    out = {}
    if len(reps) < 3:
        return {"trend_rungs": _verdict(False, reason=f"{len(reps)} resolved rungs, need 3")}
    rows = [r.scalars() for r in reps]
    for key in ("profile_sup_error", "annulus_c0_error", "annulus_c1_error", "farfield_sup_error"):
        vals = [row[key] for row in rows]
        if any(v is None for v in vals):
            out[key] = _verdict(False, values=vals, reason="unresolved at some rung")
        else:
            out[key] = _verdict(all(b <= a for a, b in zip(vals, vals[1:])), values=vals)
    kr = [row["kr_gradient_norm"] for row in rows]
    out["kr_gradient_norm"] = _verdict(all(b <= a + kr_slack for a, b in zip(kr, kr[1:])), values=kr,
                                       slack=kr_slack)
    mass = [row["total_mass"] for row in rows]
    out["total_mass"] = _verdict(all(b > a for a, b in zip(mass, mass[1:])) and abs(mass[-1] - EIGHT_PI * m) <= 1.0,
                                 values=mass, target=EIGHT_PI * m)
    return out


# ---------------------------------------------------------------------------
# scenario runners


def _run_peaks(cfg: ScenarioConfig, h):
    spec, base, ev0, P, rungs, extras = _peak_rungs(cfg, h)
    verdicts = {"census": _census_verdict(cfg, rungs), "poincare_hopf": _poincare_hopf_verdict(cfg, rungs)}
    if cfg.trends:
        reps = [r.asymptotics for r in rungs if r.resolved and r.asymptotics is not None]
        verdicts.update({f"trend_{k}": v for k, v in trend_checks(reps, cfg.expected.m).items()})
    if cfg.name == "hub":
        verdicts.update(_hub_verdicts(cfg, base, ev0, P, rungs, extras))
    return rungs, verdicts, extras


def _hub_verdicts(cfg, base, ev0, P, rungs, extras) -> dict:
    out = {}
    h = base.h
    decisive = _decisive_rungs(cfg, rungs)
    if decisive:
        r = decisive[0]
        d = [float(np.hypot(*q.location)) for q in r.census.of_kind("max")]
        out["max_at_barycenter"] = _verdict(bool(d) and min(d) <= 3 * h, distance=min(d) if d else None,
                                            tolerance=3 * h, rung=r.lam)
    else:
        out["max_at_barycenter"] = _verdict(False, reason="no resolvable rung")
    rho = cfg.options.get("k_field_rho", 0.5 * cfg.params.get("radius", 0.2))
    K = k_field(ev0, P)
    try:
        kr = census(ScalarField(base, K.values), exclusion=[(x, y, rho) for x, y in P], check_boundary=False)
    except CensusError as exc:
        out["k_field_barycenter"] = _verdict(False, reason=str(exc))
        return out
    extras["k_field_census"] = kr.to_dict()
    pts = kr.points
    ok = len(pts) == 1 and pts[0].index == -2 and float(np.hypot(*pts[0].location)) <= 3 * h
    out["k_field_barycenter"] = _verdict(ok, points=[q.to_dict() for q in pts], rho=rho)
    return out


def _run_punctured(cfg: ScenarioConfig, h):
    x0, y0, d = (float(v) for v in cfg.options["puncture"])
    spec_u = _spec(cfg)
    spec_p = _spec(cfg, {"punctures": [[x0, y0, d]]})
    base_u = _base_mesh(spec_u, h, cfg.extra_spots)
    h = base_u.h
    ev_u = GreensEvaluator(base_u)
    P = kr_peaks(cfg, ev_u)
    # peaks move when the puncture is cut out: search again on the punctured domain
    ev_p = GreensEvaluator(_base_mesh(spec_p, h, cfg.extra_spots))
    Pp = kr_critical_search(ev_p, P)
    extras = {"kr_peaks": P.tolist(), "kr_peaks_punctured": Pp.tolist(), "h": h, "k": spec_p.k,
              "puncture": [x0, y0, d]}
    rungs = []
    per = {}
    mu0 = None
    for lam in cfg.ladder:
        try:
            mus = _bubble_scales(ev_u, P, lam)
            mu0 = max(mus) if mu0 is None else mu0
            _, _, rep_u, _ = _solve_and_audit(cfg, spec_u, P, lam, mus, mu0, h, True, 0)
            mesh, p, rep, asy = _solve_and_audit(cfg, spec_p, Pp, lam, mus, mu0, h, False, cfg.expected.m)
        except _FAILURES as exc:
            rungs.append(RungResult(lam, False, reason=f"{type(exc).__name__}: {exc}"))
            continue
        near_p = [q for q in rep.points if math.dist(q.location, (x0, y0)) <= 5 * d]
        near_u = [q for q in rep_u.points if math.dist(q.location, (x0, y0)) <= 5 * d]
        extra_ok = (rep.total == rep_u.total + 1 and not near_u
                    and any(q.kind == "saddle" and q.index == -1 for q in near_p))
        per[f"{lam:g}"] = {"pass": bool(extra_ok and rep.valid and rep_u.valid), "punctured": rep.total,
                           "unpunctured": rep_u.total, "near_puncture": [q.to_dict() for q in near_p]}
        rungs.append(RungResult(lam, True, point=_point_summary(p), census=rep, asymptotics=asy,
                                extras={"bubble_scales": list(mus), "unpunctured_census": rep_u.to_dict()},
                                mesh_vertices=mesh.n_vertices, mesh_hash=mesh_hash(mesh), field=p.field))
    verdicts = {"census": _census_verdict(cfg, rungs), "poincare_hopf": _poincare_hopf_verdict(cfg, rungs),
                "extra_saddle": _verdict(bool(per) and all(v["pass"] for v in per.values()), rungs=per)}
    return rungs, verdicts, extras


def _run_am(cfg: ScenarioConfig, h):
    spec = _spec(cfg)
    mesh = triangulate(spec, h=h)
    values = cfg.options["values"]
    msum, n, rep = am_identity_check(mesh, values)
    u = ScalarField(mesh, _harmonic_values(mesh, values))
    rung = RungResult(None, True, census=rep, mesh_vertices=mesh.n_vertices, mesh_hash=mesh_hash(mesh), field=u)
    verdicts = {
        "multiplicity_sum": _verdict(msum == n - 2, value=msum, expected=n - 2),
        "index_nonpositive": _verdict(all(q.index <= -1 for q in rep.points),
                                      indices=[q.index for q in rep.points]),
        "poincare_hopf": _poincare_hopf_verdict(cfg, [rung]),
    }
    return [rung], verdicts, {"loops": n, "h": mesh.h}


def _harmonic_values(mesh, values):
    from .fem import harmonic_solve
    return harmonic_solve(mesh, values).values


def radial_family(lam: float) -> tuple:
    """Closed-form upper radial solution on the unit disk: (δ², sup norm, mass)."""
    # 8δ² = λ(1+δ²)²  ->  small root in t = δ²
    a, b, c = lam, 2 * lam - 8, lam
    t = 2 * c / (-b + math.sqrt(b * b - 4 * a * c))  # cancellation-free small root
    return t, math.log(8.0 / (lam * t)), EIGHT_PI / (1 + t)


def _run_disk_oracle(cfg: ScenarioConfig, h, timing: dict):
    spec = _spec(cfg)
    h = 0.02 if h is None else h
    t0 = time.perf_counter()
    mesh = triangulate(spec, h=h)
    branch = continuation(mesh)
    lam_star = fold_estimate(branch)
    timing["continuation_seconds"] = time.perf_counter() - t0
    rungs = []
    checks = {}
    for lam in cfg.ladder:
        try:
            p = upper_branch_solution(branch, lam)
            ev = GreensEvaluator(mesh)
            rep = census(p.field)
            asy = analyze(p, 1, ev)
        except _FAILURES + (AsymptoticsError,) as exc:
            rungs.append(RungResult(lam, False, reason=f"{type(exc).__name__}: {exc}"))
            continue
        t, sup_ex, mass_ex = radial_family(lam)
        checks[f"{lam:g}"] = {"sup": p.sup_norm, "sup_exact": sup_ex, "mass": p.mass, "mass_exact": mass_ex}
        rungs.append(RungResult(lam, True, point=_point_summary(p), census=rep, asymptotics=asy,
                                extras={"radial_family": checks[f"{lam:g}"]}, mesh_vertices=mesh.n_vertices,
                                mesh_hash=mesh_hash(mesh), field=p.field))
    timing["total_seconds"] = time.perf_counter() - t0
    verdicts = {"fold": _verdict(lam_star is not None and abs(lam_star - 2.0) <= 0.04, lambda_star=lam_star,
                                 tolerance=0.04),
                "runtime": _verdict(timing["total_seconds"] <= 120.0)}
    first = checks.get(f"{cfg.ladder[0]:g}") if cfg.ladder else None
    if first is None:
        verdicts["sup_norm"] = verdicts["mass"] = _verdict(False, reason="upper branch unresolved")
    else:
        verdicts["sup_norm"] = _verdict(abs(first["sup"] / first["sup_exact"] - 1) <= 0.05, **first)
        verdicts["mass"] = _verdict(abs(first["mass"] / first["mass_exact"] - 1) <= 0.01, **first)
    verdicts["census"] = _census_verdict(cfg, rungs)
    verdicts["poincare_hopf"] = _poincare_hopf_verdict(cfg, rungs)
    verdicts["pohozaev"] = pohozaev_study(cfg, spec, h)
    extras = {"branch_points": len(branch.points), "lambda_star": lam_star, "h": h,
              "branch_jsonl": branch.to_jsonl("field")}
    return rungs, verdicts, extras


def pohozaev_study(cfg: ScenarioConfig, spec, h: float) -> dict:
    """Pohozaev residual on a peak-graded oracle mesh and after one uniform refinement."""
    opt = cfg.options.get("pohozaev", {})
    lam = cfg.ladder[0] if cfg.ladder else 0.2
    x0 = opt.get("x0", [0.0, 0.0])
    R, delta = opt.get("R", 0.5), opt.get("delta", 0.0)
    spot = (x0[0], x0[1], opt.get("spot_factor", 0.2) * h, opt.get("spot_radius", 0.3))
    try:
        mesh = triangulate(spec, h=h, refine=[spot])
        p = solve_multipeak(GreensEvaluator(mesh), [x0], lam, symmetry=True)
        fine = refine(mesh)
        u0 = np.nan_to_num(eval_values(p.field, fine.vertices, strict=False))
        p2 = newton_solve(fine, lam, u0)
        r1 = pohozaev_residual(p, x0, R, delta)
        r2 = pohozaev_residual(p2, x0, R, delta)
    except _FAILURES + (AsymptoticsError,) as exc:
        return _verdict(False, reason=f"{type(exc).__name__}: {exc}")
    return _verdict(r1 <= 1e-2 and r2 <= 0.6 * r1, residual=r1, refined_residual=r2, ratio=r2 / r1,
                    lam=lam, R=R, delta=delta)


def run_scenario(config: ScenarioConfig, h: Optional[float] = None) -> ScenarioResult:
    """Run one configured experiment; ``h`` overrides the configured mesh size."""
    h = config.h if h is None else h
    timing = {}
    t0 = time.perf_counter()
    if config.name == "am-identity":
        rungs, verdicts, extras = _run_am(config, h)
    elif config.name == "disk-oracle":
        rungs, verdicts, extras = _run_disk_oracle(config, h, timing)
    elif config.name == "hub-punctured":
        rungs, verdicts, extras = _run_punctured(config, h)
    else:
        rungs, verdicts, extras = _run_peaks(config, h)
    extras["unresolved"] = [r.lam for r in rungs if not r.resolved]
    # results outlive the solve; keep the fields but not their meshes' factorizations
    for r in rungs:
        if r.field is not None:
            r.field.mesh.clear_cache()
    timing.setdefault("total_seconds", time.perf_counter() - t0)
    return ScenarioResult(config, rungs, verdicts, extras=extras, timing=timing)


# ---------------------------------------------------------------------------
# reports


def _slug(label: str) -> str:
    return label.replace("/", "_")


def render_report(result: ScenarioResult, out_dir, mesh_dump: bool = False) -> list:
    """Write the result JSON, the λ-ladder CSV, one SVG per rung and optional mesh/field dumps."""
    resolved = [r for r in result.rungs if r.resolved]
    if not resolved:
        raise ScenarioError("nothing to render: no resolved rung")
    base = os.path.join(out_dir, _slug(result.config.label))
    try:
        os.makedirs(base, exist_ok=True)
    except OSError as exc:
        raise ScenarioError(f"cannot create output directory {base}: {exc}") from exc
    if not os.access(base, os.W_OK):
        raise ScenarioError(f"output directory {base} is not writable")
    files = []
    rows = [(result.config.label, r.asymptotics) for r in resolved if r.asymptotics is not None]
    csv_path = os.path.join(base, "ladder.csv")
    with open(csv_path, "w") as f:
        f.write(ladder_csv(rows))
    files.append(csv_path)
    for i, r in enumerate(result.rungs):
        if not r.resolved or r.field is None:
            continue
        tag = f"rung{i}" + (f"_lambda{r.lam:g}" if r.lam is not None else "")
        svg = os.path.join(base, tag + ".svg")
        _render_svg(r, svg, title=f"{result.config.label}" + (f"  λ={r.lam:g}" if r.lam is not None else ""))
        files.append(svg)
        if mesh_dump:
            mp = os.path.join(base, tag + ".mesh")
            fp = os.path.join(base, tag + ".field")
            write_mesh(r.field.mesh, mp)
            with open(fp, "wb") as f:
                f.write(r.field.to_bytes())
            files += [mp, fp]
    if "branch_jsonl" in result.extras:
        bp = os.path.join(base, "branch.jsonl")
        with open(bp, "w") as f:
            f.write(result.extras["branch_jsonl"])
        files.append(bp)
    result.artifacts = [os.path.relpath(p, out_dir) for p in files] + [os.path.join(_slug(result.config.label),
                                                                                   "result.json")]
    jp = os.path.join(base, "result.json")
    with open(jp, "w") as f:
        f.write(result.to_json())
    with open(os.path.join(base, "timing.json"), "w") as f:
        json.dump(result.timing, f, sort_keys=True, indent=1)
    return files + [jp]


def _render_svg(r: RungResult, path: str, title: str = "") -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.patches import Circle
    from matplotlib.tri import Triangulation

    plt.rcParams["svg.hashsalt"] = "gelfand-lab"
    f = r.field
    mesh = f.mesh
    V = mesh.vertices
    tri = Triangulation(V[:, 0], V[:, 1], mesh.triangles)
    fig, ax = plt.subplots(figsize=(7, 7 * max(np.ptp(V[:, 1]), 1e-9) / max(np.ptp(V[:, 0]), 1e-9) + 0.6))
    cs = ax.tricontourf(tri, f.values, levels=24, cmap="viridis")
    fig.colorbar(cs, ax=ax, shrink=0.7)
    g, _ = vertex_fits(f)
    step = max(1, mesh.n_vertices // 900)
    idx = np.arange(0, mesh.n_vertices, step)
    nrm = np.maximum(np.hypot(g[idx, 0], g[idx, 1]), 1e-300)
    ax.quiver(V[idx, 0], V[idx, 1], g[idx, 0] / nrm, g[idx, 1] / nrm, color="white", alpha=0.5,
              scale=60, width=0.002)
    if r.census is not None:
        for i, q in enumerate(r.census.points):
            x, y = q.location
            if q.kind in ("max", "min"):
                ax.plot(x, y, "o", ms=8, mfc="red" if q.kind == "max" else "blue", mec="black",
                        gid=f"glyph-{q.kind}-{i}")
            else:
                ax.plot(x, y, "x", ms=9, mew=2, color="orange" if q.kind == "saddle" else "magenta",
                        gid=f"glyph-{q.kind}-{i}")
                ax.annotate(f"{q.index:+d}", (x, y), textcoords="offset points", xytext=(5, 5), color="black",
                            fontsize=9)
    if r.asymptotics is not None:
        for pk in r.asymptotics.per_peak:
            ax.add_patch(Circle(pk.peak.location, r.asymptotics.rho, fill=False, ec="white", ls="--", lw=1))
    ax.set_aspect("equal")
    ax.set_title(title)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
