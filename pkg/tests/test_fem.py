import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from gelfand_lab.fem import (OutOfDomain, ScalarField, assemble, eval_field, eval_gradients, eval_smooth_values,
                             eval_values, harmonic_solve, interpolant, load_field, vertex_fits)
from oracles import annulus_harmonic

coef = st.floats(-3.0, 3.0, allow_nan=False)


def _annulus_trace(mesh):
    r = np.hypot(*mesh.vertices.T)
    return np.where(r > 0.65, 0.0, 1.0)


class TestAssembly:
    def test_lumped_mass_is_area(self, disk_mesh):
        _, M = assemble(disk_mesh)
        assert M.sum() == pytest.approx(math.pi, rel=1e-2)

    def test_stiffness_kernel_contains_constants(self, disk_mesh):
        K, _ = assemble(disk_mesh)
        assert np.abs(K @ np.ones(disk_mesh.n_vertices)).max() < 1e-10
        assert abs(K - K.T).max() < 1e-12

    @given(coef, coef, coef)
    def test_linear_functions_are_discretely_harmonic(self, disk_mesh, a, b, c):
        K, _ = assemble(disk_mesh)
        u = a + b * disk_mesh.vertices[:, 0] + c * disk_mesh.vertices[:, 1]
        assert np.abs((K @ u)[disk_mesh.interior]).max() < 1e-9 * (1 + abs(a) + abs(b) + abs(c))


class TestHarmonic:
    @given(coef)
    def test_constant_data(self, disk_mesh, c):
        f = harmonic_solve(disk_mesh, [c])
        assert np.allclose(f.values, c, atol=1e-10)

    @given(coef, coef)
    def test_linear_data_reproduced(self, disk_mesh, b, c):
        lin = b * disk_mesh.vertices[:, 0] + c * disk_mesh.vertices[:, 1]
        f = harmonic_solve(disk_mesh, lin)
        assert np.allclose(f.values, lin, atol=1e-9)

    def test_annulus_log_profile(self, annulus_mesh):
        f = harmonic_solve(annulus_mesh, _annulus_trace(annulus_mesh))
        V = annulus_mesh.vertices[annulus_mesh.interior]
        assert np.abs(f.values[annulus_mesh.interior] - annulus_harmonic(V, 0.3)).max() < 1e-2

    def test_annulus_gradient_magnitude(self, annulus_mesh):
        f = harmonic_solve(annulus_mesh, _annulus_trace(annulus_mesh))
        ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
        pts = 0.6 * np.c_[np.cos(ang), np.sin(ang)]
        g = np.hypot(*eval_gradients(f, pts).T)
        expected = 1.0 / (0.6 * abs(math.log(0.3)))
        assert np.abs(g / expected - 1).max() < 0.05

    def test_bad_data_shape(self, disk_mesh):
        with pytest.raises(ValueError):
            harmonic_solve(disk_mesh, [0.0, 1.0, 2.0])


class TestEvaluation:
    def test_quadratic_gradient(self, disk_mesh):
        f = interpolant(disk_mesh, lambda x, y: x * x + y * y)
        _, g = eval_field(f, (0.2, 0.0))
        assert np.allclose(g, (0.4, 0.0), atol=4 * disk_mesh.h ** 2)

    def test_constant_gradient_vanishes(self, disk_mesh):
        f = interpolant(disk_mesh, lambda x, y: 3.0)
        g, H = vertex_fits(f)
        assert np.abs(g).max() < 1e-9 and np.abs(H).max() < 1e-7

    @given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), coef, coef, coef)
    def test_quadratic_fit_is_exact(self, disk_mesh, x, y, a, b, c):
        f = interpolant(disk_mesh, lambda X, Y: a * X * X + b * X * Y + c * Y * Y)
        g, H = eval_gradients(f, [(x, y)], with_hessian=True)
        assert np.allclose(g[0], (2 * a * x + b * y, b * x + 2 * c * y), atol=1e-8)
        assert np.allclose(H[0], [[2 * a, b], [b, 2 * c]], atol=1e-6)
        v = eval_smooth_values(f, [(x, y)])[0]
        assert v == pytest.approx(a * x * x + b * x * y + c * y * y, abs=1e-9)

    def test_linear_interpolation_exact(self, disk_mesh):
        f = interpolant(disk_mesh, lambda x, y: 1 + 2 * x - y)
        pts = np.array([(0.1, 0.2), (-0.5, 0.3), (0.0, -0.9)])
        assert np.allclose(eval_values(f, pts), 1 + 2 * pts[:, 0] - pts[:, 1])

    def test_outside_point(self, disk_mesh):
        f = interpolant(disk_mesh, lambda x, y: x)
        with pytest.raises(OutOfDomain):
            eval_values(f, [(2.0, 0.0)])
        assert np.isnan(eval_values(f, [(2.0, 0.0)], strict=False)[0])


class TestSerialization:
    def test_roundtrips(self, disk_mesh, tmp_path):
        f = interpolant(disk_mesh, lambda x, y: np.sin(x) * y)
        assert np.array_equal(ScalarField.from_bytes(f.to_bytes(), disk_mesh).values, f.values)
        assert np.array_equal(ScalarField.from_json(f.to_json(), disk_mesh).values, f.values)
        (tmp_path / "f.bin").write_bytes(f.to_bytes())
        (tmp_path / "f.json").write_text(f.to_json())
        for name in ("f.bin", "f.json"):
            assert np.array_equal(load_field(tmp_path / name, disk_mesh).values, f.values)

    def test_wrong_mesh(self, disk_mesh, annulus_mesh):
        f = interpolant(disk_mesh, lambda x, y: x)
        with pytest.raises(ValueError):
            ScalarField.from_bytes(f.to_bytes(), annulus_mesh)

    def test_rejects_nonfinite(self, disk_mesh):
        v = np.zeros(disk_mesh.n_vertices)
        v[3] = np.nan
        with pytest.raises(ValueError):
            ScalarField(disk_mesh, v)
