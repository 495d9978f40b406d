import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from needle_handover.errors import ChordTooLong, DegeneratePoints, NonPositiveDepth, ZeroDisparity
from needle_handover.geometry import (
    CameraModel,
    Circle3,
    RigidTransform,
    StereoRig,
    circles_from_pair,
    closest_point_on_circle,
    compose,
    invert,
    plane_basis,
    plane_from_points,
    point_circle_distance,
    project,
    rot_z,
    rotate_about_point,
    rotation_distance,
    triangulate,
)

finite = st.floats(-1.0, 1.0, allow_nan=False)
vec3 = st.tuples(finite, finite, finite).map(np.array)
rotvec = st.tuples(*[st.floats(-3.0, 3.0)] * 3).map(np.array)


def pose(rv, t):
    return RigidTransform.from_rotvec(rv, t)


def simple_camera(fx=1000.0, cx=500.0, cy=500.0, size=1000):
    return CameraModel(fx, fx, cx, cy, RigidTransform.identity(), size, size)


def test_compose_identity_and_inverse():
    T = pose([0.1, -0.4, 0.3], [0.01, 0.02, -0.5])
    I = RigidTransform.identity()
    TI = compose(T, I)
    assert np.allclose(TI.rotation, T.rotation) and np.allclose(TI.translation, T.translation)
    back = compose(T, invert(T))
    assert np.allclose(back.rotation, np.eye(3), atol=1e-12)
    assert np.allclose(back.translation, 0.0, atol=1e-12)


def test_compose_quarter_turns():
    q = RigidTransform(rot_z(np.pi / 2))
    assert np.allclose(compose(q, q).rotation, rot_z(np.pi), atol=1e-12)
    # hand-multiplied oracle for 180 degrees about z
    assert np.allclose(compose(q, q).rotation, np.diag([-1.0, -1.0, 1.0]), atol=1e-12)


@given(rotvec, vec3, rotvec, vec3, rotvec, vec3)
def test_compose_is_associative(r1, t1, r2, t2, r3, t3):
    a, b, c = pose(r1, t1), pose(r2, t2), pose(r3, t3)
    left = compose(compose(a, b), c)
    right = compose(a, compose(b, c))
    assert np.allclose(left.rotation, right.rotation, atol=1e-10)
    assert np.allclose(left.translation, right.translation, atol=1e-10)


@given(rotvec, vec3, vec3)
def test_invert_undoes_apply(r, t, p):
    T = pose(r, t)
    assert np.allclose(invert(T).apply(T.apply(p)), p, atol=1e-10)


def test_long_chain_stays_orthonormal():
    T = pose([0.01, 0.02, 0.03], [0.0, 0.0, 0.001])
    acc = RigidTransform.identity()
    for _ in range(2000):
        acc = compose(acc, T)
    R = acc.rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12)


def test_project_examples():
    cam = simple_camera()
    assert np.allclose(project(cam, [0.0, 0.0, 3.7]), [500.0, 500.0])
    # u = fx * x / z + cx = 1000 * 0.01 / 0.1 + 500
    assert np.allclose(project(cam, [0.01, 0.0, 0.1]), [600.0, 500.0])
    with pytest.raises(NonPositiveDepth):
        project(cam, [0.0, 0.0, -1.0])
    with pytest.raises(NonPositiveDepth):
        project(cam, [0.0, 0.0, 1e-10])


def test_camera_rejects_bad_intrinsics():
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 1.0, 1.0, RigidTransform.identity(), 10, 10)
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 20.0, 1.0, RigidTransform.identity(), 10, 10)


def test_triangulate_depth_from_disparity():
    rig = StereoRig.rectified(simple_camera(), 0.05)
    p = triangulate(rig, (550.0, 500.0), (500.0, 500.0))
    # depth = f * b / d = 1000 * 0.05 / 50
    assert p[2] == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ZeroDisparity):
        triangulate(rig, (520.0, 400.0), (520.0, 400.0))


@given(st.floats(-0.05, 0.05), st.floats(-0.05, 0.05), st.floats(0.1, 0.5))
def test_triangulate_round_trip(x, y, z):
    cam = CameraModel.looking_at([0.0, -0.2, 0.1], [0.0, 0.0, 0.0], 1200.0, 1200.0, 640.0, 480.0, 1280, 960)
    rig = StereoRig.rectified(cam, 0.06)
    p = rig.left.pose.apply(np.array([x, y, z]))
    q = triangulate(rig, project(rig.left, p), project(rig.right, p))
    assert np.allclose(q, p, atol=1e-9)


def test_rig_validates_rectification():
    left = simple_camera()
    with pytest.raises(ValueError):
        StereoRig(left, simple_camera(fx=900.0), 0.05)
    with pytest.raises(ValueError):
        StereoRig.rectified(left, -0.01)


def test_plane_from_points():
    n, d = plane_from_points([0, 0, 0], [1, 0, 0], [0, 1, 0])
    assert np.allclose(np.abs(n), [0, 0, 1]) and d == pytest.approx(0.0)
    with pytest.raises(DegeneratePoints):
        plane_from_points([0, 0, 0], [1, 1, 1], [2, 2, 2])
    rng = np.random.default_rng(7)
    pts = rng.normal(size=(3, 3))
    n, d = plane_from_points(*pts)
    assert np.max(np.abs(pts @ n - d)) < 1e-12


def test_circles_from_pair_diameter_and_chord():
    r = 0.0125
    (c,) = circles_from_pair([-r, 0, 0], [r, 0, 0], [0, 0, 1], r)
    assert np.allclose(c.center, 0.0)
    cs = circles_from_pair([0, 0, 0], [0.01, 0, 0], [0, 0, 1], r)
    # h = sqrt(r^2 - (0.005)^2), evaluated by hand
    h = 0.011456439237389600
    got = sorted(tuple(np.round(c.center, 15)) for c in cs)
    assert np.allclose(got, [(0.005, -h, 0.0), (0.005, h, 0.0)], atol=1e-15)
    with pytest.raises(ChordTooLong):
        circles_from_pair([0, 0, 0], [3 * r, 0, 0], [0, 0, 1], r)


@given(st.floats(0.001, 0.05), st.floats(0.0, 6.28), st.floats(0.01, 1.99))
def test_circles_from_pair_pass_through_both(r, a, frac):
    c0 = Circle3(np.zeros(3), np.array([0.0, 0.0, 1.0]), r)
    p1 = np.array([r * np.cos(a), r * np.sin(a), 0.0])
    b = a + frac * np.pi
    p2 = np.array([r * np.cos(b), r * np.sin(b), 0.0])
    for c in circles_from_pair(p1, p2, c0.normal, r):
        assert point_circle_distance(c, p1) < 1e-12
        assert point_circle_distance(c, p2) < 1e-12


def test_point_circle_distance_cases():
    r = 0.02
    c = Circle3(np.zeros(3), np.array([0.0, 0.0, 1.0]), r)
    assert point_circle_distance(c, [r, 0, 0]) == pytest.approx(0.0, abs=1e-15)
    assert point_circle_distance(c, [0, 0, 0]) == pytest.approx(r)
    assert point_circle_distance(c, [0, 0, 0.03]) == pytest.approx(np.hypot(r, 0.03))
    # 2r in plane, r along the normal: legs r and r
    assert point_circle_distance(c, [2 * r, 0, r]) == pytest.approx(np.sqrt(2) * r)


def test_closest_point_on_circle_axis_fallback():
    c = Circle3(np.zeros(3), np.array([0.0, 0.0, 1.0]), 1.0)
    q = closest_point_on_circle(c, [0.0, 0.0, 5.0])
    assert np.linalg.norm(q) == pytest.approx(1.0)


def test_circle_requires_unit_normal():
    with pytest.raises(ValueError):
        Circle3(np.zeros(3), np.array([0.0, 0.0, 2.0]), 1.0)


@given(st.tuples(finite, finite, finite).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_plane_basis_is_orthonormal(n):
    n = np.array(n) / np.linalg.norm(n)
    u, w = plane_basis(n)
    M = np.column_stack([u, w, n])
    assert np.allclose(M.T @ M, np.eye(3), atol=1e-12)
    assert np.linalg.det(M) == pytest.approx(1.0)


def test_rotate_about_point_keeps_pivot_fixed():
    T = pose([0.2, 0.1, -0.3], [0.05, 0.0, 0.02])
    pivot = np.array([0.01, 0.02, 0.03])
    local = invert(T).apply(pivot)
    R = rot_z(0.7)
    T2 = rotate_about_point(T, R, pivot)
    assert np.allclose(T2.apply(local), pivot, atol=1e-12)
    assert rotation_distance(T2.rotation, R @ T.rotation) < 1e-12
