"""Rigid transforms, pinhole cameras, rectified stereo and known-radius circles.

Units are meters and radians everywhere; pixels only appear at camera
boundaries. Pixel ``(u, v)`` refers to the center of column ``u``, row ``v``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import ChordTooLong, DegeneratePoints, NonPositiveDepth, ZeroDisparity

MIN_DEPTH = 1e-9
MIN_DISPARITY = 0.01
REPAIR_AFTER = 100


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def orthonormalize(R: np.ndarray) -> np.ndarray:
    """Project a near-rotation matrix back onto SO(3)."""
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """SE(3) pose. ``apply(p) = rotation @ p + translation``."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # number of compositions since the rotation was last re-orthonormalized
    chain: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation).reshape(3, 3))
        object.__setattr__(self, "translation", _frozen(self.translation).reshape(3))

    @classmethod
    def identity(cls) -> RigidTransform:
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> RigidTransform:
        return cls(rotvec_to_matrix(rotvec), translation)

    def inverse(self) -> RigidTransform:
        return invert(self)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: RigidTransform) -> RigidTransform:
        return compose(self, other)

    def as_matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def __repr__(self):
        rv = Rotation.from_matrix(self.rotation).as_rotvec()
        return f"RigidTransform(rotvec={np.round(rv, 6).tolist()}, t={np.round(self.translation, 6).tolist()})"


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform that applies ``b`` first, then ``a``."""
    R = a.rotation @ b.rotation
    chain = max(a.chain, b.chain) + 1
    if chain > REPAIR_AFTER:
        R = orthonormalize(R)
        chain = 0
    return RigidTransform(R, a.rotation @ b.translation + a.translation, chain)


def invert(t: RigidTransform) -> RigidTransform:
    Rt = t.rotation.T
    return RigidTransform(Rt, -(Rt @ t.translation), t.chain)


def rotvec_to_matrix(rotvec) -> np.ndarray:
    rv = np.asarray(rotvec, dtype=np.float64)
    if not np.any(rv):
        return np.eye(3)
    return Rotation.from_rotvec(rv).as_matrix()


def matrix_to_rotvec(R: np.ndarray) -> np.ndarray:
    return Rotation.from_matrix(R).as_rotvec()


def axis_rotation(axis, angle: float) -> np.ndarray:
    a = np.asarray(axis, dtype=np.float64)
    return rotvec_to_matrix(a / np.linalg.norm(a) * angle)


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, robust near 0 and pi."""
    return float(np.linalg.norm(matrix_to_rotvec(R)))


def rotation_distance(Ra: np.ndarray, Rb: np.ndarray) -> float:
    return rotation_angle(Ra.T @ Rb)


def angle_between(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.arctan2(np.linalg.norm(np.cross(a, b)), np.dot(a, b)))


def unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def rotate_about_point(pose: RigidTransform, R: np.ndarray, pivot) -> RigidTransform:
    """Apply world-frame rotation ``R`` about ``pivot`` to ``pose``."""
    pivot = np.asarray(pivot, dtype=np.float64)
    moved = RigidTransform(R, pivot - R @ pivot)
    return compose(moved, pose)


# ---------------------------------------------------------------- cameras


@dataclass(frozen=True, eq=False)
class CameraModel:
    """Pinhole camera. ``pose`` maps camera coordinates (x right, y down,
    z forward) to world coordinates."""

    fx: float
    fy: float
    cx: float
    cy: float
    pose: RigidTransform
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def position(self) -> np.ndarray:
        return self.pose.translation

    @property
    def optical_axis(self) -> np.ndarray:
        return self.pose.rotation[:, 2]

    def to_camera(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return (p - self.pose.translation) @ self.pose.rotation

    def project_many(self, points):
        """Vectorized projection. Returns ``(uv, depth)``; rows with
        depth <= MIN_DEPTH get NaN pixel coordinates."""
        pc = np.atleast_2d(self.to_camera(points))
        z = pc[:, 2]
        ok = z > MIN_DEPTH
        uv = np.full((len(pc), 2), np.nan)
        uv[ok, 0] = self.fx * pc[ok, 0] / z[ok] + self.cx
        uv[ok, 1] = self.fy * pc[ok, 1] / z[ok] + self.cy
        return uv, z

    @classmethod
    def looking_at(cls, position, target, fx, fy, cx, cy, width, height, right_hint=(1.0, 0.0, 0.0)):
        """Camera at ``position`` with its optical axis through ``target``;
        the image x-axis is the component of ``right_hint`` orthogonal to it."""
        z = unit(np.asarray(target, float) - np.asarray(position, float))
        x = np.asarray(right_hint, float)
        x = unit(x - np.dot(x, z) * z)
        y = np.cross(z, x)
        return cls(fx, fy, cx, cy, RigidTransform(np.column_stack([x, y, z]), position), width, height)


def project(cam: CameraModel, p) -> np.ndarray:
    pc = cam.to_camera(p)
    if pc[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"point has depth {pc[2]:.3g} m in camera frame")
    return np.array([cam.fx * pc[0] / pc[2] + cam.cx, cam.fy * pc[1] / pc[2] + cam.cy])


@dataclass(frozen=True, eq=False)
class StereoRig:
    """Rectified stereo pair: the right camera is the left one shifted by
    ``baseline`` along the left camera's x-axis."""

    left: CameraModel
    right: CameraModel
    baseline: float

    def __post_init__(self):
        l, r = self.left, self.right
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")
        if (l.fx, l.fy, l.cx, l.cy, l.width, l.height) != (r.fx, r.fy, r.cx, r.cy, r.width, r.height):
            raise ValueError("rectified rig needs identical intrinsics")
        if not np.allclose(l.pose.rotation, r.pose.rotation, atol=1e-12):
            raise ValueError("rectified rig needs equal rotations")
        offset = l.to_camera(r.position)
        if not np.allclose(offset, [self.baseline, 0.0, 0.0], atol=1e-12):
            raise ValueError("right camera must sit on the left camera's +x axis")

    @classmethod
    def rectified(cls, left: CameraModel, baseline: float) -> StereoRig:
        pos = left.position + baseline * left.pose.rotation[:, 0]
        right = CameraModel(left.fx, left.fy, left.cx, left.cy,
                            RigidTransform(left.pose.rotation, pos), left.width, left.height)
        return cls(left, right, baseline)


def triangulate(rig: StereoRig, px_left, px_right) -> np.ndarray:
    """Closed-form rectified triangulation (depth = f * b / disparity)."""
    ul, vl = float(px_left[0]), float(px_left[1])
    ur = float(px_right[0])
    d = ul - ur
    if d <= MIN_DISPARITY:
        raise ZeroDisparity(f"disparity {d:.3g} px")
    return triangulate_many(rig, np.array([ul]), np.array([vl]), np.array([d]))[0]


def triangulate_many(rig: StereoRig, u_left, v, disparity) -> np.ndarray:
    """Vectorized triangulation; caller guarantees positive disparities."""
    cam = rig.left
    z = cam.fx * rig.baseline / disparity
    pc = np.column_stack([(u_left - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
    return cam.pose.apply(pc)


# ------------------------------------------------------------------ circles


@dataclass(frozen=True, eq=False)
class Circle3:
    center: np.ndarray
    normal: np.ndarray
    radius: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise ValueError("circle normal must be unit length")
        if not self.radius > 0:
            raise ValueError("circle radius must be positive")
        object.__setattr__(self, "center", _frozen(self.center))
        object.__setattr__(self, "normal", _frozen(n))

    def flipped(self) -> Circle3:
        return Circle3(self.center, -self.normal, self.radius)

    def sample(self, n: int = 64) -> np.ndarray:
        u, w = plane_basis(self.normal)
        a = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return self.center + self.radius * (np.outer(np.cos(a), u) + np.outer(np.sin(a), w))


def plane_basis(normal):
    """Two unit vectors completing ``normal`` to a right-handed frame."""
    n = np.asarray(normal, dtype=np.float64)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    u = unit(np.cross(helper, n))
    return u, np.cross(n, u)


def plane_from_points(p1, p2, p3):
    """Plane ``normal . x = offset`` through three points."""
    p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3))
    c = np.cross(p2 - p1, p3 - p1)
    area2 = np.linalg.norm(c)
    if area2 / 2 <= 1e-12:
        raise DegeneratePoints("points are collinear")
    n = c / area2
    return n, float(np.dot(n, (p1 + p2 + p3) / 3.0))


def circles_from_pair(p1, p2, plane_normal, r: float) -> list[Circle3]:
    """Circles of radius ``r`` in the plane that pass through both points.

    Two mirror-image centers across the chord; one when the chord is a
    diameter.
    """
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    n = np.asarray(plane_normal, dtype=np.float64)
    chord = p2 - p1
    length = np.linalg.norm(chord)
    if length > 2 * r + 1e-12:
        raise ChordTooLong(f"chord {length:.6g} m exceeds diameter {2 * r:.6g} m")
    if length == 0:
        raise DegeneratePoints("coincident points")
    mid = (p1 + p2) / 2
    h2 = r * r - (length / 2) ** 2
    if h2 <= 0:
        return [Circle3(mid, n, r)]
    perp = np.cross(n, chord / length)
    h = np.sqrt(h2)
    return [Circle3(mid + h * perp, n, r), Circle3(mid - h * perp, n, r)]


def point_circle_distance(c: Circle3, p) -> float:
    """Distance from ``p`` to the closest point of the circle curve."""
    return float(points_circle_distance(c.center, c.normal, c.radius, np.atleast_2d(p))[0])


def points_circle_distance(center, normal, radius, points) -> np.ndarray:
    w = np.asarray(points, dtype=np.float64) - center
    axial = w @ normal
    radial = np.linalg.norm(w - np.outer(axial, normal), axis=1)
    return np.sqrt(axial ** 2 + (radial - radius) ** 2)


def closest_point_on_circle(c: Circle3, p) -> np.ndarray:
    w = np.asarray(p, dtype=np.float64) - c.center
    q = w - np.dot(w, c.normal) * c.normal
    nq = np.linalg.norm(q)
    if nq == 0:
        q = plane_basis(c.normal)[0]
        nq = 1.0
    return c.center + c.radius * q / nq
