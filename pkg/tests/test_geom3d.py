import io
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from oracles import linear_scan_nn
from wsgrasp.errors import DomainError, FormatError, StructuralError
from wsgrasp.geom3d import (PointCloud, RigidTransform, TriangleMesh, load_cloud_csv, nearest_neighbor,
                            parse_obj, random_rotation, rotation_about, sample_surface, save_cloud_csv,
                            serialize_obj, transform_points)

coords = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
points = arrays(np.float64, st.tuples(st.integers(2, 12), st.just(3)), elements=coords)


def random_transform(seed):
    rng = np.random.default_rng(seed)
    return RigidTransform(random_rotation(rng), rng.normal(size=3))


# ---------------------------------------------------------------- transforms

def test_rotation_is_orthonormal(rng):
    for _ in range(50):
        R = random_rotation(rng)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)
        assert np.linalg.det(R) == pytest.approx(1.0, abs=1e-12)


def test_rigid_transform_rejects_non_rotation():
    with pytest.raises(DomainError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(DomainError):
        RigidTransform(np.eye(3) * 1.001)


def test_identity_transform_leaves_cloud():
    c = PointCloud(np.arange(12.0).reshape(4, 3))
    assert np.array_equal(transform_points(RigidTransform(), c).points, c.points)


def test_pure_translation():
    c = PointCloud(np.zeros((1, 3)))
    out = transform_points(RigidTransform.from_translation((1, 2, 3)), c)
    assert np.array_equal(out.points, [[1.0, 2.0, 3.0]])


def test_normals_rotate_without_translation():
    T = RigidTransform(rotation_about((0, 0, 1), math.pi / 2), (5, 5, 5))
    out = transform_points(T, PointCloud([[0, 0, 0]], [[1, 0, 0]]))
    assert np.allclose(out.normals, [[0, 1, 0]], atol=1e-15)


@given(points, st.integers(0, 2 ** 31))
def test_transform_round_trip_and_rigidity(p, seed):
    T = random_transform(seed)
    q = T.apply(p)
    assert np.allclose(T.inverse().apply(q), p, atol=1e-12)
    dp = np.linalg.norm(p[:, None] - p[None], axis=-1)
    dq = np.linalg.norm(q[:, None] - q[None], axis=-1)
    assert np.allclose(dp, dq, atol=1e-9)


def test_compose_matches_matrix_product():
    A, B = random_transform(1), random_transform(2)
    assert np.allclose((A @ B).matrix(), A.matrix() @ B.matrix(), atol=1e-14)


# ---------------------------------------------------------------- OBJ

def test_parse_minimal_obj():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3")
    assert m.vertices.shape == (3, 3)
    assert m.faces.tolist() == [[0, 1, 2]]


def test_quad_is_fan_triangulated():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    assert m.faces.tolist() == [[0, 1, 2], [0, 2, 3]]


def test_out_of_range_face_is_structural():
    with pytest.raises(StructuralError):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9")


def test_malformed_record_reports_line():
    with pytest.raises(FormatError, match="line 2"):
        parse_obj("v 0 0 0\nv 1 zero 0\n")


def test_slash_tokens_negative_indices_and_ignored_records():
    text = "# c\nv 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nvt 0 0\ng grp\nf 1/1/1 2//1 -1\n"
    assert parse_obj(io.StringIO(text)).faces.tolist() == [[0, 1, 2]]


def test_degenerate_faces_dropped():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 4\n")
    assert m.faces.tolist() == [[0, 1, 3]]
    assert np.all(m.face_areas() > 0)


def test_obj_round_trip_idempotent():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nv 0 0 1\nf 1 2 3 4\nf 1 2 5\n")
    again = parse_obj(serialize_obj(m))
    assert np.array_equal(again.faces, m.faces)
    assert np.array_equal(again.vertices, m.vertices)
    assert np.array_equal(parse_obj(serialize_obj(again)).faces, again.faces)


# ---------------------------------------------------------------- sampling

TRI = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])


def test_samples_on_triangle_plane():
    c = sample_surface(TRI, 1000, seed=3)
    assert np.max(np.abs(c.points[:, 2])) <= 1e-12
    assert np.all(c.points[:, 0] + c.points[:, 1] <= 1 + 1e-12)
    assert np.allclose(c.normals, [0, 0, 1])


def test_sampling_is_deterministic():
    a = sample_surface(TRI, 100, seed=7)
    b = sample_surface(TRI, 100, seed=7)
    assert np.array_equal(a.points, b.points)


def test_area_weighting_binomial():
    # areas 1 and 3
    m = TriangleMesh([[0, 0, 0], [2, 0, 0], [0, 1, 0], [10, 0, 0], [13, 0, 0], [10, 2, 0]],
                     [[0, 1, 2], [3, 4, 5]])
    _, face, _ = sample_surface(m, 40000, seed=11, return_faces=True)
    n0 = int(np.sum(face == 0))
    sigma = math.sqrt(40000 * 0.25 * 0.75)
    assert abs(n0 - 10000) < 3 * sigma


def test_barycentric_coordinates_valid():
    _, _, bary = sample_surface(TRI, 500, seed=1, return_faces=True)
    assert np.all(bary >= 0) and np.all(bary <= 1)
    assert np.allclose(bary.sum(axis=1), 1.0, atol=1e-12)


def test_empty_mesh_is_structural():
    with pytest.raises(StructuralError):
        sample_surface(TriangleMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=int)), 5, seed=0)


# ---------------------------------------------------------------- nearest neighbour

def test_member_query():
    pts = np.random.default_rng(0).normal(size=(50, 3))
    assert nearest_neighbor(pts[17], PointCloud(pts)) == (17, 0.0)


def test_analytic_nearest():
    i, d = nearest_neighbor([0.9, 0, 0], PointCloud([[0, 0, 0], [2, 0, 0]]))
    assert i == 0 and d == pytest.approx(0.81, abs=1e-15)


def test_tie_goes_to_lowest_index():
    cloud = PointCloud([[1, 0, 0], [-1, 0, 0], [0, 1, 0]])
    assert nearest_neighbor([0, 0, 0], cloud)[0] == 0


def test_matches_linear_scan():
    rng = np.random.default_rng(5)
    pts = rng.uniform(size=(1000, 3))
    cloud = PointCloud(pts)
    for q in rng.uniform(size=(100, 3)):
        assert nearest_neighbor(q, cloud) == linear_scan_nn(q, pts)


@given(points, arrays(np.float64, 3, elements=coords))
def test_nearest_distance_is_minimal(p, q):
    _, d = nearest_neighbor(q, PointCloud(p))
    assert all(d <= float(np.sum((q - c) ** 2)) for c in p)


def test_empty_cloud_rejected():
    with pytest.raises(StructuralError):
        PointCloud(np.zeros((0, 3)))


def test_non_unit_normals_rejected():
    with pytest.raises(DomainError):
        PointCloud([[0, 0, 0]], [[0, 0, 2]])


def test_cloud_csv_round_trip(tmp_path):
    c = sample_surface(TRI, 20, seed=2)
    save_cloud_csv(c, tmp_path / "c.csv")
    header = (tmp_path / "c.csv").read_text().splitlines()[0]
    assert header == "x,y,z,nx,ny,nz"
    back = load_cloud_csv(tmp_path / "c.csv")
    assert np.allclose(back.points, c.points, rtol=1e-8, atol=1e-12)


def test_cloud_csv_bad_header(tmp_path):
    (tmp_path / "c.csv").write_text("a,b,c\n1,2,3\n")
    with pytest.raises(FormatError):
        load_cloud_csv(tmp_path / "c.csv")
