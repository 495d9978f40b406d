"""Closed-loop needle presentation: acquisition sweep, fixed-point servoing
of the held needle, and positioning for the handover."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    AcquisitionFailed,
    BothUnreachable,
    EstimationFailed,
    InsufficientObservation,
    NotConverged,
    PositioningFailed,
)
from .geometry import (
    RigidTransform,
    angle_between,
    axis_rotation,
    compose,
    invert,
    matrix_to_rotvec,
    rotate_about_point,
    rotation_angle,
    rotvec_to_matrix,
    unit,
)
from .kinematics import DEFAULT_TOLERANCE, Arm, choose_curvature_config
from .perception import CircleFit, NeedleStateEstimate, PointCloud, RansacParams, estimate_state
from .sim import STREAM_RANSAC, SimWorld, render_stereo

log = logging.getLogger(__name__)

TABLE_NORMAL = np.array([0.0, 0.0, 1.0])
EXPLORE_STEP = np.radians(30.0)
EXPLORE_LIMIT = 12
POSTCHECK_ANGLE = np.radians(10.0)


@dataclass(frozen=True)
class ServoParams:
    max_iterations: int = 10
    tolerance: float = 0.01  # rad
    step_cap: float = 0.35  # rad per iteration

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if not self.step_cap > 0:
            raise ValueError("step_cap must be positive")


class MetricKind(enum.Enum):
    AlignNormalToCamera = "align_normal"
    AlignTipAndFlatten = "align_tip_flatten"


@dataclass(frozen=True, eq=False)
class ServoMetric:
    """Maps a needle estimate to the rotation that would reach the target.

    ``AlignNormalToCamera`` turns the normal toward ``camera_position``.
    ``AlignTipAndFlatten`` makes the normal parallel to ``table_normal`` and
    points the tip horizontally at ``other_gripper``.
    """

    kind: MetricKind
    camera_position: np.ndarray | None = None
    other_gripper: np.ndarray | None = None
    table_normal: np.ndarray = field(default_factory=lambda: TABLE_NORMAL.copy())

    def __call__(self, est: NeedleStateEstimate) -> np.ndarray:
        """Rotation vector (world frame) of the full correction."""
        n = unit(est.normal)
        c = np.asarray(est.center, float)
        if self.kind is MetricKind.AlignNormalToCamera:
            v = unit(np.asarray(self.camera_position, float) - c)
            axis = np.cross(n, v)
            s = np.linalg.norm(axis)
            angle = float(np.arctan2(s, np.dot(n, v)))
            if angle == 0.0:
                return np.zeros(3)
            if s < 1e-12:
                # normal points straight away: any perpendicular axis works
                axis = np.cross(n, [1.0, 0.0, 0.0])
                if np.linalg.norm(axis) < 1e-6:
                    axis = np.cross(n, [0.0, 1.0, 0.0])
            return unit(axis) * angle
        up = unit(self.table_normal)
        target_n = up if np.dot(n, up) >= 0 else -up
        h = np.asarray(self.other_gripper, float) - c
        h = unit(h - np.dot(h, up) * up)
        t = np.asarray(est.tip, float) - c
        t = unit(t - np.dot(t, n) * n)
        A = np.column_stack([n, t, np.cross(n, t)])
        B = np.column_stack([target_n, h, np.cross(target_n, h)])
        return matrix_to_rotvec(B @ A.T)


@dataclass
class TraceRecord:
    stage: str
    iteration: int
    delta: float
    inliers: int


def cap_rotation(rotvec, cap: float) -> np.ndarray:
    rotvec = np.asarray(rotvec, float)
    angle = np.linalg.norm(rotvec)
    if angle <= cap:
        return rotvec
    return rotvec * (cap / angle)


# ------------------------------------------------------------- estimators


@dataclass(frozen=True)
class StereoEstimator:
    """Renders the stereo masks and runs the perception pipeline. The RANSAC
    seed is derived from the world seed and clock."""

    radius: float
    params: RansacParams = RansacParams()
    refine: bool = True

    def __call__(self, world: SimWorld, arm: Arm) -> NeedleStateEstimate:
        left, right = render_stereo(world)
        params = replace(self.params, seed=world.stream_seed(STREAM_RANSAC, world.clock))
        return estimate_state((left, right), world.rig, world.commanded(arm).translation,
                              self.radius, params, refine=self.refine)


def exact_estimator(world: SimWorld, arm: Arm) -> NeedleStateEstimate:
    """Ground-truth estimate (normal facing the left camera); the cloud is
    the sampled arc, all of it inliers."""
    needle = world.needle
    circle = needle.circle
    if np.dot(circle.normal, world.rig.left.position - circle.center) < 0:
        circle = circle.flipped()
    pts = needle.arc_points(world.scene.settings.arc_spacing)
    cloud = PointCloud(pts, np.zeros(len(pts), dtype=np.int64))
    fit = CircleFit(circle, np.arange(len(pts)), 0.0)
    return NeedleStateEstimate(circle, needle.tip.copy(), len(pts), fit, cloud)


def _estimate(estimator, world, arm) -> NeedleStateEstimate:
    try:
        return estimator(world, arm)
    except InsufficientObservation as exc:
        raise EstimationFailed(str(exc)) from exc


# ------------------------------------------------------------------ servo


def presentation_servo(estimator, world: SimWorld, arm: Arm, metric: ServoMetric,
                       params: ServoParams = ServoParams(), trace: list | None = None,
                       stage: str = "servo"):
    """Fixed-point rotation servo of the held needle about its estimated center.

    Each iteration estimates the needle, computes the capped correction and
    commands it, until the correction falls below ``params.tolerance``.

    Returns
    -------
    (estimate, updates)
        The converged estimate and the number of commanded updates.

    Raises
    ------
    EstimationFailed
        The estimator reported too few inliers.
    NotConverged
        Still above tolerance after ``max_iterations`` updates; carries the
        last estimate.
    """
    est = None
    for i in range(params.max_iterations + 1):
        est = _estimate(estimator, world, arm)
        rotvec = cap_rotation(metric(est), params.step_cap)
        delta = float(np.linalg.norm(rotvec))
        log.debug("%s iter=%d delta=%.4f inliers=%d", stage, i, delta, est.inlier_count)
        if trace is not None:
            trace.append(TraceRecord(stage, i, delta, est.inlier_count))
        if delta < params.tolerance:
            return est, i
        if i == params.max_iterations:
            break
        R = rotvec_to_matrix(rotvec)
        world.move(arm, rotate_about_point(world.commanded(arm), R, est.center))
    raise NotConverged(f"{stage}: no convergence in {params.max_iterations} updates",
                       est, params.max_iterations)


def _servo_lenient(estimator, world, arm, metric, params, trace, stage):
    # an unconverged loop still leaves the needle near the target; the caller
    # checks the end state
    try:
        est, _ = presentation_servo(estimator, world, arm, metric, params, trace, stage)
    except NotConverged as exc:
        log.info("%s", exc)
        est = exc.estimate
    return est


def acquire_needle(world: SimWorld, arm: Arm, params: ServoParams = ServoParams(),
                   estimator=None, trace: list | None = None) -> NeedleStateEstimate:
    """Bring the held needle into view and face it to the left camera.

    The arm goes to its home pose, then turns in 30 degree steps about world
    z and x (alternating, about the gripper) until an estimate has enough
    inliers.
    """
    if estimator is None:
        estimator = StereoEstimator(world.needle.radius)
    home = world.scene.homes[arm]
    world.move(arm, home)
    est = None
    for k in range(EXPLORE_LIMIT + 1):
        try:
            est = estimator(world, arm)
            break
        except InsufficientObservation as exc:
            if trace is not None:
                trace.append(TraceRecord("explore", k, 0.0, exc.inlier_count))
            if k == EXPLORE_LIMIT:
                break
            axis = [0.0, 0.0, 1.0] if k % 2 == 0 else [1.0, 0.0, 0.0]
            pose = world.commanded(arm)
            world.move(arm, rotate_about_point(pose, axis_rotation(axis, EXPLORE_STEP), pose.translation))
    if est is None:
        raise AcquisitionFailed(f"needle not found after {EXPLORE_LIMIT} exploratory rotations")
    metric = ServoMetric(MetricKind.AlignNormalToCamera, camera_position=world.rig.left.position)
    try:
        return _servo_lenient(estimator, world, arm, metric, params, trace, "align")
    except EstimationFailed as exc:
        raise AcquisitionFailed(str(exc)) from exc


def handover_goals(est: NeedleStateEstimate, gripper: RigidTransform, center, toward):
    """Gripper goals placing the needle center at ``center``, flat, tip
    pointing along ``toward``; the second goal is the first turned half a
    revolution about the tip direction."""
    n = unit(est.normal)
    t = np.asarray(est.tip, float) - est.center
    t = unit(t - np.dot(t, n) * n)
    frame = RigidTransform(np.column_stack([t, np.cross(n, t), n]), est.center)
    in_hand = compose(invert(gripper), frame)
    h = unit(toward)
    up = TABLE_NORMAL
    goals = []
    for R in (np.column_stack([h, np.cross(up, h), up]), np.column_stack([h, -np.cross(up, h), -up])):
        goals.append(compose(RigidTransform(R, center), invert(in_hand)))
    return goals


def handover_position(world: SimWorld, arm: Arm, params: ServoParams = ServoParams(),
                      estimator=None, estimate: NeedleStateEstimate | None = None,
                      trace: list | None = None) -> NeedleStateEstimate:
    """Move the needle to the workspace center, flat, tip toward the other
    gripper, then servo it there. Raises PositioningFailed if the end state
    misses the target by more than 10 degrees or leaves the tolerance box."""
    if estimator is None:
        estimator = StereoEstimator(world.needle.radius)
    model = world.scene.arms[arm]
    other = world.commanded(arm.other).translation
    center = model.workspace_center
    try:
        est = estimate if estimate is not None else _estimate(estimator, world, arm)
        toward = other - center
        toward = toward - np.dot(toward, TABLE_NORMAL) * TABLE_NORMAL
        goal_a, goal_b = handover_goals(est, world.commanded(arm), center, toward)
        choice = choose_curvature_config(goal_a, goal_b, model)
        log.debug("curvature %s residual %.3f", choice.label, choice.solution.residual)
        world.move(arm, choice.solution.pose)
        metric = ServoMetric(MetricKind.AlignTipAndFlatten, other_gripper=other)
        est = _servo_lenient(estimator, world, arm, metric, params, trace, "flatten")
    except (BothUnreachable, EstimationFailed) as exc:
        raise PositioningFailed(str(exc)) from exc
    check_handover_pose(est, other, center)
    return est


def check_handover_pose(est: NeedleStateEstimate, other_gripper, center, tol=DEFAULT_TOLERANCE) -> None:
    n_err = min(angle_between(est.normal, TABLE_NORMAL), angle_between(est.normal, -TABLE_NORMAL))
    if n_err >= POSTCHECK_ANGLE:
        raise PositioningFailed(f"needle normal {np.degrees(n_err):.1f} deg off vertical")
    h = np.asarray(other_gripper, float) - est.center
    h = h - np.dot(h, TABLE_NORMAL) * TABLE_NORMAL
    t_err = angle_between(np.asarray(est.tip, float) - est.center, h)
    if t_err >= POSTCHECK_ANGLE:
        raise PositioningFailed(f"tip direction {np.degrees(t_err):.1f} deg off the other gripper")
    if np.any(np.abs(est.center - np.asarray(center, float)) > np.asarray(tol, float)):
        raise PositioningFailed("needle center outside the workspace tolerance box")


def rotation_error(est: NeedleStateEstimate, metric: ServoMetric) -> float:
    """Magnitude of the uncapped correction, radians."""
    return float(rotation_angle(rotvec_to_matrix(metric(est))))
