"""Triangle-mesh SDF: closest features, pseudonormal signs, BVH pruning, IO."""

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from geomdeeponet.errors import MeshValidationError, ParseError
from geomdeeponet.mesh import (
    EDGE_AB, FACE, VERT_A, TriMesh, box_mesh, brute_force_sdf, closest_point_on_triangles,
    icosphere, load_mesh, mesh_sdf, read_stl, write_json_mesh, write_stl,
)

TRI = (np.array([0.0, 0.0, 0.0]), np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0]))


def _segment_distance(p, a, b):
    t = np.clip(np.dot(p - a, b - a) / np.dot(b - a, b - a), 0, 1)
    return np.linalg.norm(p - (a + t * (b - a)))


def _triangle_distance_oracle(p, a, b, c, n=400):
    """Dense barycentric sampling plus exact edge distances."""
    u, v = np.meshgrid(np.linspace(0, 1, n), np.linspace(0, 1, n))
    keep = u + v <= 1
    pts = a + u[keep, None] * (b - a) + v[keep, None] * (c - a)
    dense = np.linalg.norm(pts - p, axis=1).min()
    edges = min(_segment_distance(p, a, b), _segment_distance(p, b, c), _segment_distance(p, c, a))
    # interior minimum from the plane projection, when it lands inside
    nrm = np.cross(b - a, c - a)
    nrm /= np.linalg.norm(nrm)
    q = p - np.dot(p - a, nrm) * nrm
    M = np.stack([b - a, c - a], axis=1)
    uv = np.linalg.lstsq(M, q - a, rcond=None)[0]
    face = abs(np.dot(p - a, nrm)) if uv.min() >= 0 and uv.sum() <= 1 else np.inf
    return min(dense, edges, face)


class TestClosestPoint:
    def test_face_region(self):
        q, f = closest_point_on_triangles(np.array([0.25, 0.25, 2.0]), *TRI)
        assert_allclose(q, [0.25, 0.25, 0.0])
        assert f == FACE

    def test_vertex_region(self):
        q, f = closest_point_on_triangles(np.array([-1.0, -1.0, 0.5]), *TRI)
        assert_allclose(q, TRI[0])
        assert f == VERT_A

    def test_edge_region(self):
        q, f = closest_point_on_triangles(np.array([0.5, -2.0, 0.0]), *TRI)
        assert_allclose(q, [0.5, 0.0, 0.0])
        assert f == EDGE_AB

    def test_random_against_oracle(self, rng):
        a, b, c = rng.normal(size=(3, 3))
        for p in rng.normal(size=(50, 3)) * 2:
            q, _ = closest_point_on_triangles(p, a, b, c)
            d = np.linalg.norm(q - p)
            assert d <= _triangle_distance_oracle(p, a, b, c) + 1e-12
            assert d >= _triangle_distance_oracle(p, a, b, c) - 1e-12


class TestTriMesh:
    def test_icosphere_centre(self):
        m = icosphere(3)
        s = m.sdf(np.zeros((1, 3)))[0]
        assert -1.0 < s < -0.98
        assert_allclose(s, m.brute_force_sdf(np.zeros((1, 3)))[0], rtol=0, atol=1e-12)

    def test_vertex_is_zero(self):
        m = icosphere(2)
        assert_array_equal(m.sdf(m.vertices[:10]), np.zeros(10))

    def test_bvh_matches_brute_force(self, rng):
        m = icosphere(2)
        p = rng.uniform(-1.5, 1.5, size=(500, 3))
        fast, slow = mesh_sdf(p, m), brute_force_sdf(p, m)
        assert_allclose(fast, slow, rtol=0, atol=1e-9)
        assert_array_equal(np.sign(fast), np.sign(slow))

    def test_sign_matches_ray_parity(self, rng):
        m = box_mesh([1.0, 0.5, 2.0], divisions=2)
        p = rng.uniform(-2.5, 2.5, size=(1000, 3))
        s = m.sdf(p)
        keep = np.abs(s) > 1e-9
        assert_array_equal((s < 0)[keep], m.contains(p[keep]))

    def test_refinement_approaches_sphere(self, rng):
        p = rng.uniform(-2, 2, size=(200, 3))
        exact = np.linalg.norm(p, axis=1) - 1.0
        errs = [np.abs(icosphere(k).sdf(p) - exact).max() for k in (1, 2, 3)]
        assert errs[0] > errs[1] > errs[2]

    def test_box_mesh_volume(self):
        m = box_mesh([1.0, 2.0, 3.0], divisions=3)
        assert_allclose(m.signed_volume(), 48.0, rtol=1e-12)

    def test_box_mesh_sdf_is_exact(self, rng):
        half = np.array([1.0, 2.0, 3.0])
        m = box_mesh(half)
        p = rng.uniform(-4, 4, size=(300, 3))
        q = np.abs(p) - half
        exact = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
        assert_allclose(m.sdf(p), exact, atol=1e-12)


class TestValidation:
    def test_open_mesh_rejected(self):
        m = icosphere(1)
        with pytest.raises(MeshValidationError, match="edge"):
            TriMesh(m.vertices, m.triangles[:-1])

    def test_inverted_orientation_rejected(self):
        m = icosphere(1)
        with pytest.raises(MeshValidationError):
            TriMesh(m.vertices, m.triangles[:, ::-1])

    def test_bad_index(self):
        m = icosphere(1)
        tris = m.triangles.copy()
        tris[0, 0] = 10_000
        with pytest.raises(MeshValidationError, match="triangle 0"):
            TriMesh(m.vertices, tris)

    def test_degenerate_face(self):
        m = icosphere(1)
        tris = m.triangles.copy()
        tris[3, 1] = tris[3, 0]
        with pytest.raises(MeshValidationError):
            TriMesh(m.vertices, tris)


class TestMeshIO:
    def test_stl_round_trip(self, tmp_path, rng):
        m = icosphere(2)
        write_stl(m, tmp_path / "s.stl")
        back = read_stl(tmp_path / "s.stl")
        p = rng.normal(size=(50, 3))
        assert_array_equal(back.sdf(p), m.sdf(p))

    def test_json_round_trip(self, tmp_path):
        m = box_mesh([1, 1, 1])
        write_json_mesh(m, tmp_path / "b.json")
        back = load_mesh(tmp_path / "b.json")
        assert_array_equal(back.vertices, m.vertices)
        assert_array_equal(back.triangles, m.triangles)

    def test_bad_stl_line_number(self, tmp_path):
        path = tmp_path / "bad.stl"
        path.write_text("solid x\n facet normal 0 0 1\n  outer loop\n   vertex 0 0 zz\n")
        with pytest.raises(ParseError, match=":4:"):
            read_stl(path)
