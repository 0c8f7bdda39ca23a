"""Command-line entry point: ``gelfand-lab run|census|greens``.

Heavy numerical imports happen inside the subcommands so that the thread
caps derived from ``GELFAND_THREADS`` are in the environment before any
BLAS library is loaded, here and in worker processes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

BLAS_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")


def thread_budget() -> int:
    raw = os.environ.get("GELFAND_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise SystemExit(f"GELFAND_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise SystemExit(f"GELFAND_THREADS must be a positive integer, got {raw!r}")
    return n


def _cap_blas(n: int) -> None:
    for var in BLAS_VARS:
        os.environ[var] = str(n)


def _parse_floats(text: str, what: str, count=None) -> list:
    try:
        vals = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise SystemExit(f"{what}: expected comma-separated numbers, got {text!r}")
    if count is not None and len(vals) != count:
        raise SystemExit(f"{what}: expected {count} numbers, got {len(vals)}")
    return vals


def _configs(scenario: str, ladder):
    from .scenarios import ScenarioError, default_configs, load_config

    if os.path.isfile(scenario):
        cfgs = [load_config(scenario)]
    else:
        try:
            cfgs = default_configs(scenario)
        except ScenarioError as exc:
            raise SystemExit(str(exc))
    if ladder is not None:
        for c in cfgs:
            if c.name != "am-identity":
                c.ladder = list(ladder)
    return cfgs


def _run_one(cfg, h, out, mesh_dump):
    """Worker: run one configuration, write its report, return a JSON-able summary."""
    from .asymptotics import ladder_csv
    from .scenarios import ScenarioError, render_report, run_scenario

    result = run_scenario(cfg, h=h)
    rows = [(cfg.label, r.asymptotics) for r in result.rungs if r.resolved and r.asymptotics is not None]
    files = []
    if out is not None:
        try:
            files = render_report(result, out, mesh_dump=mesh_dump)
        except ScenarioError as exc:
            files = []
            print(f"[{cfg.label}] report skipped: {exc}", file=sys.stderr)
    return {"label": cfg.label, "passed": result.passed,
            "verdicts": {k: bool(v.get("pass")) for k, v in result.verdicts.items()},
            "unresolved": result.extras.get("unresolved", []),
            "csv": ladder_csv(rows) if rows else "",
            "files": [os.path.relpath(f, out) for f in files] if out is not None else []}


def cmd_run(args) -> int:
    budget = thread_budget()
    ladder = _parse_floats(args.lambda_ladder, "--lambda-ladder") if args.lambda_ladder else None
    if ladder is not None and any(not x > 0 for x in ladder):
        raise SystemExit("--lambda-ladder values must be positive")
    if args.h is not None and not args.h > 0:
        raise SystemExit("--h must be positive")
    workers_wanted = None
    # the scenario list is known only after import; cap BLAS for the worst case first
    _cap_blas(budget)
    cfgs = _configs(args.scenario, ladder)
    workers_wanted = max(1, min(budget, len(cfgs)))
    out = args.out
    if out is not None:
        os.makedirs(out, exist_ok=True)
    if workers_wanted == 1:
        summaries = [_run_one(c, args.h, out, args.mesh_dump) for c in cfgs]
    else:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        _cap_blas(max(1, budget // workers_wanted))
        with ProcessPoolExecutor(max_workers=workers_wanted, mp_context=mp.get_context("spawn")) as pool:
            futs = [pool.submit(_run_one, c, args.h, out, args.mesh_dump) for c in cfgs]
            summaries = [f.result() for f in futs]
    for s in summaries:
        bad = [k for k, ok in s["verdicts"].items() if not ok]
        line = f"{s['label']}: {'PASS' if s['passed'] else 'FAIL'}"
        if bad:
            line += f"  failing: {', '.join(bad)}"
        if s["unresolved"]:
            line += f"  unresolved rungs: {s['unresolved']}"
        print(line)
    if out is not None:
        csv_parts = [s["csv"] for s in summaries if s["csv"]]
        if csv_parts:
            header = csv_parts[0].splitlines()[0]
            body = [ln for part in csv_parts for ln in part.splitlines()[1:]]
            with open(os.path.join(out, "ladder.csv"), "w") as f:
                f.write("\n".join([header] + body) + "\n")
        summary = {s["label"]: {"passed": s["passed"], "verdicts": s["verdicts"], "files": s["files"]}
                   for s in summaries}
        with open(os.path.join(out, "summary.json"), "w") as f:
            json.dump(summary, f, sort_keys=True, indent=1)
    return 0 if all(s["passed"] for s in summaries) else 1


def cmd_census(args) -> int:
    _cap_blas(thread_budget())
    from .census import census
    from .fem import load_field
    from .geometry import read_mesh

    mesh = read_mesh(args.mesh)
    field = load_field(args.field, mesh)
    rep = census(field)
    print(json.dumps(rep.to_dict(), sort_keys=True, indent=1))
    return 0 if rep.consistent else 1


def _domain_from_arg(text: str):
    from .geometry import GeometryError, build_domain

    if os.path.isfile(text):
        with open(text) as f:
            text = f.read()
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SystemExit(f"--domain: not a JSON file or JSON text ({exc})")
    if "kind" not in d:
        raise SystemExit("--domain: JSON needs a 'kind' field")
    try:
        spec = build_domain(d["kind"], d.get("params", {}))
    except GeometryError as exc:
        raise SystemExit(f"--domain: {exc}")
    if "holes" in d and int(d["holes"]) != spec.k:
        raise SystemExit(f"--domain: file says {d['holes']} holes, construction gives {spec.k}")
    return spec, d.get("h")


def cmd_greens(args) -> int:
    _cap_blas(thread_budget())
    import numpy as np

    from .geometry import triangulate
    from .greens import GreensError, GreensEvaluator, kirchhoff_routh, robin_eval

    spec, h = _domain_from_arg(args.domain)
    probe = np.array(_parse_floats(args.probe, "--probe", count=2))
    mesh = triangulate(spec, h=args.h if args.h is not None else h)
    ev = GreensEvaluator(mesh)
    try:
        R = robin_eval(ev, probe)
        _, g = kirchhoff_routh(ev, probe[None])
    except GreensError as exc:
        print(f"greens: {exc}", file=sys.stderr)
        return 1
    out = {"domain": spec.kind, "holes": spec.k, "h": mesh.h, "probe": probe.tolist(),
           "robin": R, "robin_gradient": (2.0 * g).tolist()}
    print(json.dumps(out, sort_keys=True, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gelfand-lab", description="Numerical laboratory for -Δu = λe^u, u = 0 on ∂Ω.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a scenario (by name or JSON config) and write its report")
    r.add_argument("--scenario", required=True, help="scenario name or path to a ScenarioConfig JSON file")
    r.add_argument("--h", type=float, default=None, help="override the base mesh size")
    r.add_argument("--lambda-ladder", default=None, help="comma-separated λ values replacing the configured ladder")
    r.add_argument("--out", default=None, help="report directory (nothing is written without it)")
    r.add_argument("--mesh-dump", action="store_true", help="also write each rung's mesh and field")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("census", help="critical-point census of a saved field")
    c.add_argument("--field", required=True)
    c.add_argument("--mesh", required=True)
    c.set_defaults(func=cmd_census)

    g = sub.add_parser("greens", help="Robin function and its gradient at a probe point")
    g.add_argument("--domain", required=True, help="DomainSpec JSON file or text: {kind, params[, holes, h]}")
    g.add_argument("--probe", required=True, help="x,y")
    g.add_argument("--h", type=float, default=None, help="mesh size (default from the JSON or the domain)")
    g.set_defaults(func=cmd_greens)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
