"""Fold value λ* of the minimal branch on each scenario domain.

The scenario ladders are {0.2, 0.1, 0.05} times a per-domain scale, taken
as λ*/2 rounded (1 for the disk and dumbbell, 1.5 for the holed disk, 23
for the hub).

    python scripts/fold_scales.py [--h 0.04]
"""

import argparse

from gelfand_lab.gelfand import continuation, fold_estimate
from gelfand_lab.geometry import triangulate
from gelfand_lab.scenarios import _spec, default_configs


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--h", type=float, default=None, help="mesh size (default: each scenario's own)")
    args = ap.parse_args()
    cases = [(name, _spec(default_configs(name)[0])) for name in ("thm-a", "thm-b", "thm-c", "hub")]
    for name, spec in cases:
        mesh = triangulate(spec, h=args.h)
        branch = continuation(mesh, max_points=200)
        lam = fold_estimate(branch)
        print(f"{name:<12} vertices={mesh.n_vertices:<7d} fold λ*={lam:.4f}  λ*/2={lam / 2:.4f}")


if __name__ == "__main__":
    main()
