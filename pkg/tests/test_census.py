import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gelfand_lab.census import (CensusReport, CriticalPoint, WindingError, am_identity_check, census,
                                classify_point, local_maxima, locate_critical_points, poincare_hopf_check,
                                radial_monotonicity_check, robust_index, winding_index)
from gelfand_lab.fem import ScalarField, interpolant
from gelfand_lab.geometry import build_domain, triangulate
from gelfand_lab.greens import k_field, kr_critical_search
import oracles


@pytest.fixture(scope="module")
def bowl(disk_mesh):
    return interpolant(disk_mesh, lambda x, y: -(x * x + y * y))


@pytest.fixture(scope="module")
def saddle(disk_mesh):
    return interpolant(disk_mesh, lambda x, y: x * x - y * y)


@pytest.fixture(scope="module")
def monkey(fine_disk_mesh):
    return interpolant(fine_disk_mesh, lambda x, y: x ** 3 - 3 * x * y * y)


@pytest.fixture(scope="module")
def radial_exact(peaked_disk_mesh):
    lam = 0.2
    return ScalarField(peaked_disk_mesh, oracles.radial_solution_xy(lam)(peaked_disk_mesh.vertices))


class TestLocate:
    def test_single_maximum(self, bowl):
        pts = locate_critical_points(bowl)
        assert len(pts) == 1 and np.hypot(*pts[0]) < 1e-6

    def test_single_saddle(self, saddle):
        pts = locate_critical_points(saddle)
        assert len(pts) == 1 and np.hypot(*pts[0]) < 1e-6

    @given(st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
    def test_shifted_maximum(self, disk_mesh, a, b):
        f = interpolant(disk_mesh, lambda x, y: -((x - a) ** 2 + 2 * (y - b) ** 2))
        rep = census(f, check_boundary=False)
        assert rep.total == 1
        (p,) = rep.points
        assert p.kind == "max" and p.index == 1 and p.nondegenerate
        assert np.hypot(p.location[0] - a, p.location[1] - b) < 1e-6


class TestIndex:
    def test_max_plus_one(self, bowl):
        assert robust_index(bowl, (0.0, 0.0)) == 1

    def test_saddle_minus_one(self, saddle):
        cp = classify_point(saddle, (0.0, 0.0))
        assert cp.index == -1 and cp.kind == "saddle" and cp.multiplicity == 1

    def test_monkey_saddle_minus_two(self, monkey):
        cp = classify_point(monkey, (0.0, 0.0))
        assert cp.index == -2 and cp.kind == "degenerate" and cp.multiplicity == 2

    @given(st.floats(0.1, 0.5))
    def test_radius_stable(self, saddle, monkey, r):
        assert winding_index(saddle, (0.0, 0.0), r) == -1
        assert winding_index(monkey, (0.0, 0.0), r) == -2

    def test_circle_leaving_domain(self, saddle):
        with pytest.raises(WindingError):
            winding_index(saddle, (0.9, 0.0), 0.2)

    def test_too_few_samples(self, saddle):
        with pytest.raises(ValueError):
            winding_index(saddle, (0.0, 0.0), 0.2, samples=16)

    def test_crowded_circle(self, saddle):
        with pytest.raises(WindingError):
            winding_index(saddle, (0.0, 0.0), 0.2, others=np.array([[0.1, 0.0]]))


class TestSolutions:
    def test_radial_peak_is_nondegenerate_max(self, radial_exact):
        rep = census(radial_exact)
        assert rep.counts == {"maxima": 1, "saddles": 0, "minima": 0, "degenerate": 0}
        assert rep.index_sum == 1 == rep.chi and rep.consistent

    def test_radial_family_monotone(self, radial_exact):
        ok, worst = radial_monotonicity_check(radial_exact, (0.0, 0.0), 0.9)
        assert ok and worst < 0

    def test_saddle_not_monotone(self, saddle):
        ok, _ = radial_monotonicity_check(saddle, (0.0, 0.0), 0.5)
        assert not ok

    def test_dumbbell_two_peak_census(self, dumbbell2_solution):
        p, P = dumbbell2_solution
        rep = census(p.field)
        assert rep.counts["maxima"] == 2 and rep.counts["saddles"] == 1 and rep.total == 3
        (neck,) = rep.of_kind("saddle")
        assert neck.index == -1 and abs(neck.location[0]) < 0.05
        for q in local_maxima(p.field):
            assert radial_monotonicity_check(p.field, q, 0.5)[0]

    def test_restricted_and_serialized(self, dumbbell2_solution):
        p, P = dumbbell2_solution
        rep = poincare_hopf_check(p.field, peaks=P, rho=0.3)
        assert rep.index_sum == 1
        assert rep.restricted([(x, y, 0.3) for x, y in P]).total == 1
        d = rep.to_dict()
        assert set(d) >= {"chi", "index_sum", "points"}
        assert set(d["points"][0]) == {"x", "y", "kind", "index", "multiplicity", "eigs", "nondegenerate"}


class TestHarmonicIdentity:
    @pytest.mark.parametrize("kind,params,values,expected", [
        ("annulus", {"inner_radius": 0.4}, [0.0, 1.0], 0),
        ("disk_with_holes", {"holes": [[-0.4, 0.0, 0.15], [0.4, 0.0, 0.15]]}, [0.0, 1.0, 1.0], 1),
        ("disk_with_holes", {"holes": [[-0.45, 0.0, 0.12], [0.3, 0.35, 0.12], [0.3, -0.35, 0.12]]},
         [0.0, 1.0, 1.0, 1.0], 2),
    ])
    def test_multiplicity_sum(self, kind, params, values, expected):
        mesh = triangulate(build_domain(kind, params), h=0.04)
        msum, n, rep = am_identity_check(mesh, values)
        assert msum == expected == n - 2
        assert all(p.index <= -1 for p in rep.points)

    def test_constant_data_rejected(self, annulus_mesh):
        with pytest.raises(ValueError):
            am_identity_check(annulus_mesh, [1.0, 1.0])


class TestKField:
    def test_hub_barycentre_is_index_minus_two(self, hub_evaluator):
        ev = hub_evaluator
        init = 0.577 * np.array([(math.cos(a), math.sin(a)) for a in math.pi / 2 + 2 * math.pi * np.arange(3) / 3])
        P = kr_critical_search(ev, init, symmetry=ev.mesh.domain.symmetry)
        K = k_field(ev, P)
        rep = census(K, exclusion=[(x, y, 0.1) for x, y in P], check_boundary=False)
        (o,) = rep.points
        assert o.index == -2 and o.kind == "degenerate" and np.hypot(*o.location) < 3 * ev.h


def test_report_properties():
    cp = CriticalPoint(location=(0.0, 0.0), value=1.0, kind="max", index=1, multiplicity=0,
                       hessian_eigs=(-2.0, -1.0), nondegenerate=True, grad_norm=0.0)
    rep = CensusReport([cp], chi=1)
    assert rep.consistent and rep.total == 1 and rep.of_kind("max") == [cp]
