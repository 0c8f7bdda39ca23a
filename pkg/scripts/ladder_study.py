"""Run one scenario on an extended λ ladder and print the per-rung measures.

    python scripts/ladder_study.py thm-a --ladder 0.2,0.1,0.05,0.025
"""

import argparse

from gelfand_lab.scenarios import default_configs, run_scenario

COLUMNS = ("lambda", "total_mass", "max_delta", "max_height", "profile_sup_error",
           "farfield_sup_error", "kr_gradient_norm")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("scenario")
    ap.add_argument("--ladder", default=None, help="comma-separated λ values")
    ap.add_argument("--h", type=float, default=None)
    args = ap.parse_args()
    for cfg in default_configs(args.scenario):
        if args.ladder:
            cfg.ladder = [float(x) for x in args.ladder.split(",")]
        res = run_scenario(cfg, h=args.h)
        print(f"# {cfg.label}: {'PASS' if res.passed else 'FAIL'}")
        print("  ".join(f"{c:>18}" for c in COLUMNS + ("census",)))
        for r in res.rungs:
            if not r.resolved:
                print(f"{r.lam:>18.6g}  unresolved: {r.reason}")
                continue
            s = r.asymptotics.scalars() if r.asymptotics is not None else {"lambda": r.lam}
            cells = [f"{s[c]:>18.6g}" if s.get(c) is not None else f"{'-':>18}" for c in COLUMNS]
            cells.append(f"{r.census.index_sum:>18d}")
            print("  ".join(cells))
        for name, v in sorted(res.verdicts.items()):
            print(f"  {name}: {'pass' if v['pass'] else 'FAIL'}")


if __name__ == "__main__":
    main()
