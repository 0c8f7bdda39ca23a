import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.spatial import cKDTree

from gelfand_lab.geometry import (DomainSpec, GeometryError, build_domain, euler_characteristic, mesh_hash,
                                  read_mesh, refine, triangulate, validate_mesh, write_mesh)


def _mirror_closed(V, tol=1e-9):
    tree = cKDTree(V)
    d, _ = tree.query(V * [1.0, -1.0])
    return float(d.max()) < tol


class TestDomains:
    def test_unit_disk_is_one_loop(self, disk_spec):
        assert disk_spec.k == 0
        r = np.hypot(*disk_spec.outer.points.T)
        assert np.allclose(r, 1.0, atol=2e-3)
        assert disk_spec.diameter == pytest.approx(2.0, abs=5e-3)
        assert disk_spec.area == pytest.approx(math.pi, rel=1e-3)

    def test_dumbbell_three_balls(self):
        spec = build_domain("dumbbell", {"m": 3, "eps": 0.15})
        assert spec.k == 0
        assert spec.symmetry == ("reflect",)
        assert _mirror_closed(triangulate(spec, h=0.06).vertices)

    def test_punctured_hub_has_one_hole(self):
        spec = build_domain("hub", {"m": 3, "radius": 0.2, "eps": 0.05, "punctures": [[0.16, 0.577, 0.015]]})
        assert spec.k == 1
        assert spec.symmetry is None

    def test_domain_json_roundtrip(self):
        spec = build_domain("disk_with_holes", {"holes": [[0.4, 0.0, 0.15]]})
        back = DomainSpec.from_json(spec.to_json())
        assert back.k == 1 and back.kind == spec.kind
        assert back.area == pytest.approx(spec.area)

    @pytest.mark.parametrize("kind,params", [
        ("annulus", {"inner_radius": 1.2}),
        ("disk_with_holes", {"holes": [[0.9, 0.0, 0.2]]}),
        ("disk_with_holes", {"holes": [[0.2, 0.0, 0.2], [-0.1, 0.0, 0.2]]}),
        ("dumbbell", {"m": 2, "eps": 1.5}),
        ("dumbbell", {"m": 2, "eps": 0.1, "sep": 1.5}),
        ("hub", {"m": 2, "eps": 0.05}),
        ("disk", {"radius": -1.0}),
        ("hub", {"m": 3, "radius": 0.2, "eps": 0.05, "punctures": [[0.5, 0.0, 0.01]]}),
        ("triangle", {}),
    ])
    def test_invalid_parameters_raise(self, kind, params):
        with pytest.raises(GeometryError):
            build_domain(kind, params)


class TestMeshTopology:
    def test_disk_chi_one(self, disk_mesh):
        assert euler_characteristic(disk_mesh) == 1

    def test_annulus_chi_zero(self, annulus_spec):
        assert euler_characteristic(triangulate(annulus_spec, h=0.05)) == 0

    def test_hub_with_one_handle_per_ball(self):
        spec = build_domain("hub", {"m": 3, "radius": 0.2, "eps": 0.05, "handles": 1})
        assert spec.k == 3
        mesh = triangulate(spec, h=0.02)
        assert euler_characteristic(mesh) == -2

    @given(st.lists(st.tuples(st.floats(-0.55, 0.55), st.floats(-0.55, 0.55)), min_size=1, max_size=3))
    def test_chi_counts_holes(self, centers):
        holes = []
        for x, y in centers:
            if math.hypot(x, y) < 0.65 and all(math.hypot(x - a, y - b) > 0.4 for a, b, _ in holes):
                holes.append([x, y, 0.1])
        spec = build_domain("disk_with_holes", {"holes": holes})
        assert euler_characteristic(triangulate(spec, h=0.08)) == 1 - len(holes)

    def test_neck_too_coarse(self):
        spec = build_domain("dumbbell", {"m": 2, "eps": 0.1})
        with pytest.raises(GeometryError):
            triangulate(spec, h=0.1)

    def test_quality_and_size(self, disk_mesh):
        validate_mesh(disk_mesh)
        assert disk_mesh.min_angle_deg() >= 20.0 - 1e-6
        assert np.mean(disk_mesh.edge_lengths) == pytest.approx(0.05, rel=0.3)

    def test_local_refinement_spot(self, disk_spec):
        mesh = triangulate(disk_spec, h=0.08, refine=[(0.3, 0.0, 0.01, 0.05)])
        d = np.hypot(*(mesh.vertices - [0.3, 0.0]).T)
        near = mesh.vertex_sizes[d < 0.03]
        assert near.size and near.max() < 0.03


class TestRefine:
    def test_refine_disk(self, disk_spec):
        coarse = triangulate(disk_spec, h=0.1)
        fine = refine(coarse)
        assert euler_characteristic(fine) == 1
        assert fine.h == pytest.approx(0.05)
        ratio = fine.n_vertices / coarse.n_vertices
        assert 3.0 < ratio < 4.5
        r = np.hypot(*fine.vertices[fine.boundary].T)
        assert np.allclose(r, 1.0, atol=1e-6)

    def test_refine_annulus_twice(self, annulus_spec):
        mesh = refine(refine(triangulate(annulus_spec, h=0.1)))
        assert euler_characteristic(mesh) == 0


class TestExchange:
    def test_roundtrip(self, disk_mesh, tmp_path):
        p = tmp_path / "d.mesh"
        write_mesh(disk_mesh, p)
        back = read_mesh(p)
        assert mesh_hash(back) == mesh_hash(disk_mesh)
        assert np.array_equal(back.boundary_tags, disk_mesh.boundary_tags)
        assert p.read_text().startswith(f"mesh v={disk_mesh.n_vertices} t={len(disk_mesh.triangles)}\n")

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "bad.mesh"
        p.write_text("hello\n")
        with pytest.raises(GeometryError):
            read_mesh(p)

    def test_deterministic(self, disk_spec):
        assert mesh_hash(triangulate(disk_spec, h=0.1)) == mesh_hash(triangulate(disk_spec, h=0.1))
