import math

from hypothesis import given, settings, strategies as st
import numpy as np
import pytest

from box4d import geometry as geo
from box4d.errors import EmptySet, NonPositiveDepth
import oracles

K = geo.CameraIntrinsics.default()


def test_project_backproject_roundtrip(rng):
    for _ in range(50):
        p = np.array([*rng.uniform(-2, 2, 2), rng.uniform(0.5, 10)])
        u, v, z = geo.project(p, K)
        assert np.allclose(geo.backproject((u, v), z, K), p, atol=1e-12)


def test_principal_point_projects_to_center():
    assert geo.project((0.0, 0.0, 3.0), K)[:2] == (K.cx, K.cy)


def test_project_rejects_non_positive_depth():
    with pytest.raises(NonPositiveDepth):
        geo.project((0.0, 0.0, 0.0), K)
    with pytest.raises(NonPositiveDepth):
        geo.backproject((1.0, 1.0), -1.0, K)


def test_project_points_marks_behind_as_nan():
    u, v, z = geo.project_points([[0, 0, 1], [0, 0, -1]], K)
    assert np.isfinite(u[0]) and np.isnan(u[1])


def test_pixel_index_rounds_to_centers():
    col, row, ok = geo.pixel_index([0.49, 0.5, -0.6, 127.4], [0.0, 0.0, 0.0, 0.0], K)
    assert col.tolist()[:2] == [0, 1]
    assert ok.tolist() == [True, True, False, True]


def test_rigid_inverse_and_composition(rng):
    for _ in range(20):
        T = geo.RigidTransform(oracles.random_rotation(rng), rng.normal(size=3))
        S = geo.RigidTransform(oracles.random_rotation(rng), rng.normal(size=3))
        p = rng.normal(size=(5, 3))
        assert np.allclose(T.inverse().apply(T.apply(p)), p, atol=1e-12)
        assert np.allclose((T @ S).apply(p), T.apply(S.apply(p)), atol=1e-12)


def test_rejects_non_rotation():
    with pytest.raises(ValueError):
        geo.RigidTransform(np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        geo.OrientedBox3D((0, 0, 0), (1, 1, 1), np.eye(3) * 2)


def test_corners_match_enumeration(rng):
    for _ in range(10):
        R = oracles.random_rotation(rng)
        c, d = rng.normal(size=3), rng.uniform(0.1, 2, 3)
        box = geo.OrientedBox3D(c, d, R)
        assert np.allclose(geo.box_corners(box), oracles.brute_corners(c, d, R), atol=1e-12)
        generic = np.array(geo.corners_generic(c.tolist(), d.tolist(), R.tolist()))
        assert np.allclose(generic, geo.box_corners(box), atol=1e-12)


def test_unit_cube_translation_shifts_corners():
    a = geo.OrientedBox3D((0, 0, 0), (1, 1, 1))
    b = geo.OrientedBox3D((1, 2, 3), (1, 1, 1))
    assert np.array_equal(geo.box_corners(b) - geo.box_corners(a), np.tile([1.0, 2.0, 3.0], (8, 1)))


def test_transform_box_is_corner_equivariant(rng):
    for _ in range(20):
        box = geo.OrientedBox3D(rng.normal(size=3), rng.uniform(0.1, 2, 3), oracles.random_rotation(rng))
        T = geo.RigidTransform(oracles.random_rotation(rng), rng.normal(size=3))
        assert np.allclose(geo.box_corners(geo.transform_box(T, box)), T.apply(geo.box_corners(box)), atol=1e-9)


def test_yaw_detection():
    assert geo.OrientedBox3D.from_yaw((0, 0, 0), (1, 1, 1), 0.7).yaw == pytest.approx(0.7)
    rx = np.array([[1, 0, 0], [0, math.cos(0.3), -math.sin(0.3)], [0, math.sin(0.3), math.cos(0.3)]])
    assert geo.OrientedBox3D((0, 0, 0), (1, 1, 1), rx).yaw is None


def test_tight_fitting_box_contains_points(rng):
    R = geo.yaw_matrix(0.4)
    pts = rng.normal(size=(200, 3))
    box = geo.tight_fitting_box(pts, R)
    assert np.all(geo.points_in_box(pts, box, tol=1e-12))
    local = pts @ R
    assert np.allclose(box.dims, local.max(0) - local.min(0))
    with pytest.raises(EmptySet):
        geo.tight_fitting_box(np.zeros((0, 3)), R)


# ---------------------------------------------------------------------------
# IoU


def test_iou_identical_and_disjoint():
    a = geo.OrientedBox3D((0, 0, 0), (1, 2, 3), geo.yaw_matrix(0.3))
    assert geo.iou3d(a, a) == pytest.approx(1.0, abs=1e-12)
    b = geo.OrientedBox3D((10, 0, 0), (1, 2, 3))
    assert geo.iou3d(a, b) == 0.0


def test_iou_half_overlapping_cubes():
    # two unit cubes offset by 0.5 along x: 0.5 / 1.5
    a = geo.OrientedBox3D((0, 0, 0), (1, 1, 1))
    b = geo.OrientedBox3D((0.5, 0, 0), (1, 1, 1))
    assert geo.iou3d(a, b) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_nested_box():
    a = geo.OrientedBox3D((0, 0, 0), (2, 2, 2))
    b = geo.OrientedBox3D((0.2, -0.1, 0.1), (1, 1, 1), geo.yaw_matrix(0.7))
    assert geo.iou3d(a, b) == pytest.approx(1 / 8, abs=1e-12)


def test_iou_degenerate_is_zero():
    a = geo.OrientedBox3D((0, 0, 0), (1, 0, 1))
    assert geo.iou3d(a, a) == 0.0


def test_iou_matches_axis_aligned_formula(rng):
    for _ in range(30):
        c1, c2 = rng.uniform(-0.5, 0.5, 3), rng.uniform(-0.5, 0.5, 3)
        d1, d2 = rng.uniform(0.2, 1.5, 3), rng.uniform(0.2, 1.5, 3)
        got = geo.iou3d(geo.OrientedBox3D(c1, d1), geo.OrientedBox3D(c2, d2))
        assert got == pytest.approx(oracles.axis_aligned_iou(c1, d1, c2, d2), abs=1e-12)


def test_iou_matches_monte_carlo(rng):
    for k in range(10):
        R = geo.yaw_matrix(rng.uniform(-3, 3)) if k % 2 else oracles.random_rotation(rng)
        a = geo.OrientedBox3D(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.5, 1.5, 3), R)
        b = geo.OrientedBox3D(rng.uniform(-0.3, 0.3, 3), rng.uniform(0.5, 1.5, 3), oracles.random_rotation(rng))
        assert geo.iou3d(a, b) == pytest.approx(oracles.mc_iou(a, b, 200_000, rng), abs=5e-3)


boxes = st.builds(
    lambda c, d, yaw: geo.OrientedBox3D(c, d, geo.yaw_matrix(yaw)),
    st.lists(st.floats(-1, 1), min_size=3, max_size=3),
    st.lists(st.floats(0.1, 2), min_size=3, max_size=3),
    st.floats(-math.pi, math.pi),
)


@settings(max_examples=40, deadline=None)
@given(boxes, boxes)
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = geo.iou3d(a, b), geo.iou3d(b, a)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(boxes, boxes, st.floats(-math.pi, math.pi), st.lists(st.floats(-5, 5), min_size=3, max_size=3))
def test_iou_rigid_invariant(a, b, angle, t):
    T = geo.RigidTransform(geo.yaw_matrix(angle), t)
    assert geo.iou3d(geo.transform_box(T, a), geo.transform_box(T, b)) == pytest.approx(geo.iou3d(a, b), abs=1e-9)


def test_iou2d_examples():
    assert geo.iou2d((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert geo.iou2d((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert geo.iou2d((0, 0, 1, 1), (0, 0, 1, 1)) == 1.0


def test_clip_box_vertices_half_space():
    box = geo.OrientedBox3D((0, 0, 0), (2, 2, 2))
    v = geo.clip_box_vertices(box, (0, 0, 1), 0.0)
    assert len(v) == 8
    assert v[:, 2].max() == pytest.approx(0.0)


# ---------------------------------------------------------------------------
# Chamfer


def test_chamfer_matches_brute_force(rng):
    for _ in range(10):
        A, B = rng.normal(size=(int(rng.integers(1, 12)), 3)), rng.normal(size=(int(rng.integers(1, 12)), 3))
        assert geo.chamfer(A, B) == pytest.approx(oracles.brute_chamfer(A, B), abs=1e-12)


def test_chamfer_hand_examples():
    assert geo.chamfer([[0, 0, 0]], [[3, 4, 0]]) == pytest.approx(5.0)
    assert geo.chamfer([[0, 0, 0]], [[3, 4, 0]], squared=True) == pytest.approx(25.0)
    pts = np.eye(3)
    assert geo.chamfer(pts, pts) == 0.0


def test_chamfer_generic_agrees_with_plain(rng):
    from box4d import autodiff as ad

    A, B = rng.normal(size=(8, 3)), rng.normal(size=(8, 3))
    seeded = [[ad.Dual(c, np.zeros(1)) for c in p] for p in A]
    assert ad.value(geo.chamfer_generic(seeded, B.tolist())) == pytest.approx(geo.chamfer(A, B), abs=1e-12)


def test_chamfer_empty_raises():
    with pytest.raises(EmptySet):
        geo.chamfer(np.zeros((0, 3)), np.zeros((1, 3)))
