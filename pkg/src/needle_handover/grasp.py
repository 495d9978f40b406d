"""Fine grasping by the receiving arm: one direction policy per table axis,
each servoed with a step that halves on every reversal."""

from __future__ import annotations

import csv
import enum
import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.linear_model import LogisticRegression

from .errors import (
    DegenerateDemos,
    GraspMissed,
    GripperOffscreen,
    MaxStepsExceeded,
    PositioningFailed,
    Unreachable,
)
from .geometry import CameraModel, RigidTransform, axis_rotation, unit
from .kinematics import Arm, ik_solve
from .perception import NeedleStateEstimate
from .servo import exact_estimator, handover_goals
from .sim import (
    STREAM_POLICY,
    ActionCommand,
    GraspCheck,
    NoiseSettings,
    Scene,
    SimWorld,
    StartConfig,
    adjudicate_grasp,
    all_configs,
    build_scene,
    make_world,
    render_view,
)

log = logging.getLogger(__name__)

GRASP_INWARD = np.radians(20.0)
# tiny box: the pre-grasp position is fixed, only the wrist may deviate
PREGRASP_TOL = (1e-6, 1e-6, 1e-6)


@dataclass(frozen=True)
class GraspParams:
    beta_decay: float = 0.5
    stop_threshold: float = 0.0002
    initial_step: float = 0.0016
    descent: float = 0.01
    max_steps: int = 50

    def __post_init__(self):
        if not 0 < self.beta_decay < 1:
            raise ValueError("beta_decay must be in (0, 1)")
        if not self.stop_threshold > 0:
            raise ValueError("stop_threshold must be positive")
        if not self.initial_step > 0:
            raise ValueError("initial_step must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")


class Axis(enum.Enum):
    X = "X"
    Y = "Y"

    @property
    def vector(self) -> np.ndarray:
        return np.array([1.0, 0.0, 0.0]) if self is Axis.X else np.array([0.0, 1.0, 0.0])

    @property
    def index(self) -> int:
        return 0 if self is Axis.X else 1


class CropSource(enum.Enum):
    Inclined = "inclined"
    Overhead = "overhead"


@dataclass(frozen=True)
class CropSpec:
    source: CropSource
    height: int
    width: int

    @classmethod
    def for_axis(cls, axis: Axis) -> CropSpec:
        if axis is Axis.X:
            return cls(CropSource.Inclined, 140, 200)
        return cls(CropSource.Overhead, 70, 200)


@dataclass(frozen=True, eq=False)
class AxisPolicy:
    """``observe(world, arm, query_index)`` produces the observation that
    ``decide`` maps to +1 / -1 along ``axis``."""

    axis: Axis
    decide: Callable[[object], int]
    observe: Callable[[SimWorld, Arm, int], object]

    def query(self, world: SimWorld, arm: Arm, index: int) -> int:
        d = int(self.decide(self.observe(world, arm, index)))
        if d not in (1, -1):
            raise ValueError(f"policy returned {d}, expected +1 or -1")
        return d


# ------------------------------------------------------------------ crops


def crop_egocentric(image: np.ndarray, gripper_pose: RigidTransform, camera: CameraModel,
                    spec: CropSpec) -> np.ndarray:
    """``spec``-sized window around the projected gripper, shifted inside the
    image when it would cross a border."""
    uv, z = camera.project_many(gripper_pose.translation[None])
    u, v = uv[0]
    h, w = image.shape[:2]
    if not (z[0] > 0 and np.isfinite(u) and 0 <= u < w and 0 <= v < h):
        raise GripperOffscreen("gripper does not project into the image")
    if spec.height > h or spec.width > w:
        raise ValueError("crop larger than image")
    r0 = int(np.clip(round(v) - spec.height // 2, 0, h - spec.height))
    c0 = int(np.clip(round(u) - spec.width // 2, 0, w - spec.width))
    return image[r0:r0 + spec.height, c0:c0 + spec.width]


def crop_features(crop: np.ndarray, block: int = 10) -> np.ndarray:
    """Block-mean downsampled intensities, flattened."""
    h, w = crop.shape
    hb, wb = h // block, w // block
    return crop[:hb * block, :wb * block].reshape(hb, block, wb, block).mean(axis=(1, 3)).ravel()


def observe_crop(axis: Axis, block: int = 10):
    """Observation function: render the policy camera, crop around the
    gripper's kinematic position, downsample."""
    spec = CropSpec.for_axis(axis)

    def observe(world: SimWorld, arm: Arm, index: int) -> np.ndarray:
        cam = world.rig.left if spec.source is CropSource.Inclined else world.scene.overhead
        img = render_view(world, cam, arm)
        return crop_features(crop_egocentric(img, world.commanded(arm), cam, spec), block)

    return observe


# ----------------------------------------------------------------- oracle


@dataclass(frozen=True)
class OracleObservation:
    offset: float  # target minus gripper along the axis, meters
    stamp: tuple  # identifies the query for the seeded label flip


def grasp_target_point(world: SimWorld) -> np.ndarray:
    """Ground-truth grasp point: 20 degrees in from the needle tip."""
    needle = world.needle
    return needle.point_at(needle.angle_inward_from_tip(GRASP_INWARD))


def oracle_decision(obs: OracleObservation, flip_rate: float, seed: int, axis: Axis) -> int:
    if obs.offset > 0:
        d = 1
    elif obs.offset < 0:
        d = -1
    else:
        d = 1 if obs.stamp[-1] % 2 == 0 else -1
    if flip_rate > 0:
        ss = np.random.SeedSequence([seed, STREAM_POLICY, axis.index, *obs.stamp])
        if np.random.Generator(np.random.Philox(ss)).random() < flip_rate:
            d = -d
    return d


def oracle_policy(axis: Axis, world: SimWorld | None = None, flip_rate: float = 0.05,
                  seed: int | None = None) -> AxisPolicy:
    """Sign of (ground-truth grasp point - actual gripper) along ``axis``,
    flipped with probability ``flip_rate``. Exactly at the target the
    answer alternates starting with +1."""
    if seed is None:
        seed = world.seed if world is not None else 0

    def observe(w: SimWorld, arm: Arm, index: int) -> OracleObservation:
        k = axis.index
        offset = float(grasp_target_point(w)[k] - w.pose(arm).translation[k])
        return OracleObservation(offset, (w.clock, index))

    def decide(obs: OracleObservation) -> int:
        return oracle_decision(obs, flip_rate, seed, axis)

    return AxisPolicy(axis, decide, observe)


def constant_policy(axis: Axis, direction: int = 1) -> AxisPolicy:
    """Always answers ``direction``; used for fault injection."""
    return AxisPolicy(axis, lambda obs: direction, lambda w, arm, i: None)


# ---------------------------------------------------------------- learned


@dataclass(eq=False)
class PolicyEnsemble:
    """Majority vote of linear classifiers; each member is (weights, bias)."""

    weights: np.ndarray  # (members, features)
    biases: np.ndarray  # (members,)
    training_accuracy: float = float("nan")

    def predict(self, features) -> np.ndarray:
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        votes = np.where(X @ self.weights.T + self.biases > 0, 1, -1).sum(axis=1)
        # odd member count, so no ties
        return np.where(votes > 0, 1, -1)

    def decide(self, features) -> int:
        return int(self.predict(features)[0])

    def to_text(self) -> str:
        lines = [f"members {len(self.biases)} features {self.weights.shape[1]}",
                 f"training_accuracy {self.training_accuracy!r}"]
        for w, b in zip(self.weights, self.biases):
            lines.append(" ".join(repr(float(x)) for x in (b, *w)))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> PolicyEnsemble:
        lines = text.strip().splitlines()
        head = lines[0].split()
        m, f = int(head[1]), int(head[3])
        acc = float(lines[1].split()[1])
        rows = np.array([[float(x) for x in line.split()] for line in lines[2:2 + m]])
        if rows.shape != (m, f + 1):
            raise ValueError("malformed ensemble text")
        return cls(rows[:, 1:], rows[:, 0], acc)


def train_ensemble(X, y, members: int = 5, seed: int = 0, C: float = 1.0) -> PolicyEnsemble:
    """Bootstrap-bagged logistic regressions; labels are +1 / -1."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y).astype(int)
    labels, counts = np.unique(y, return_counts=True)
    if len(labels) < 2:
        raise DegenerateDemos("demonstrations contain a single direction")
    if counts.min() < 2:
        raise DegenerateDemos("need at least 2 demonstrations per direction")
    W, B = [], []
    for k in range(members):
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, k])))
        idx = rng.integers(0, len(y), len(y))
        if len(np.unique(y[idx])) < 2:
            idx = np.arange(len(y))
        clf = LogisticRegression(C=C, max_iter=2000)
        clf.fit(X[idx], y[idx])
        # sklearn orders classes ascending: positive score means +1
        W.append(clf.coef_[0])
        B.append(clf.intercept_[0])
    ens = PolicyEnsemble(np.array(W), np.array(B))
    ens.training_accuracy = float(np.mean(ens.predict(X) == y))
    return ens


def train_axis_policy(demos, axis: Axis = Axis.X, seed: int = 0, observe=None) -> AxisPolicy:
    """Fit a 5-member voting ensemble on ``(features, direction)`` demos.

    The returned policy carries the ensemble as ``policy.decide.__self__``;
    its training accuracy is ``ensemble.training_accuracy``.
    """
    if not demos:
        raise DegenerateDemos("no demonstrations")
    X = np.array([np.asarray(f, dtype=np.float64).ravel() for f, _ in demos])
    y = np.array([int(d) for _, d in demos])
    ens = train_ensemble(X, y, seed=seed)
    log.info("axis %s policy: training accuracy %.3f", axis.value, ens.training_accuracy)
    return AxisPolicy(axis, ens.decide, observe or observe_crop(axis))


def write_demos(path, demos, axis: Axis) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        for feats, label in demos:
            wr.writerow([axis.value, int(label), *(repr(float(x)) for x in np.ravel(feats))])


def read_demos(path):
    demos, axes = [], set()
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            axes.add(row[0])
            demos.append((np.array([float(x) for x in row[2:]]), int(row[1])))
    return demos, axes


# ------------------------------------------------------------- servo loop


@dataclass
class AxisServoResult:
    axis: Axis
    moves: int
    flips: int
    net_displacement: float
    travel: float
    final_step: float
    directions: list = field(default_factory=list)


def _below(step: float, threshold: float) -> bool:
    # relative slack so that e.g. 1.6mm * 0.5**3 counts as exactly 0.2mm
    return step < threshold * (1.0 - 1e-9)


def servo_axis(world: SimWorld, arm: Arm, policy: AxisPolicy,
               params: GraspParams = GraspParams()) -> AxisServoResult:
    """Step the gripper along one table axis as the policy directs; the step
    is multiplied by ``beta_decay`` at every reversal and the loop stops
    once it falls under ``stop_threshold``.

    Raises MaxStepsExceeded after ``max_steps`` moves.
    """
    step = params.initial_step
    prev = None
    res = AxisServoResult(policy.axis, 0, 0, 0.0, 0.0, step)
    vec = policy.axis.vector
    while True:
        d = policy.query(world, arm, res.moves)
        if prev is not None and d != prev:
            step *= params.beta_decay
            res.flips += 1
            if _below(step, params.stop_threshold):
                break
        if res.moves >= params.max_steps:
            raise MaxStepsExceeded(
                f"axis {policy.axis.value}: {params.max_steps} moves without convergence",
                policy.axis.value)
        pose = world.commanded(arm)
        world.move(arm, RigidTransform(pose.rotation, pose.translation + d * step * vec))
        res.moves += 1
        res.net_displacement += d * step
        res.travel += step
        res.directions.append(d)
        prev = d
    res.final_step = step
    return res


# -------------------------------------------------------------- execution


def grasp_target(est: NeedleStateEstimate, inward: float = GRASP_INWARD):
    """Point ``inward`` radians along the estimated arc from the tip, and the
    arc tangent there. The side of the tip that carries inliers is the arc."""
    n = unit(est.normal)
    c = np.asarray(est.center, float)
    r0 = np.asarray(est.tip, float) - c
    r0 = r0 - np.dot(r0, n) * n
    sign = 1.0
    if est.cloud is not None and est.fit is not None and est.fit.inlier_count:
        v = est.cloud.points[est.fit.inlier_indices] - c
        ang = np.arctan2(np.cross(r0, v) @ n, v @ r0)
        window = np.radians(45.0)
        pos = np.count_nonzero((ang > 0) & (ang < window))
        neg = np.count_nonzero((ang < 0) & (ang > -window))
        sign = 1.0 if pos >= neg else -1.0
    R = axis_rotation(n, sign * inward)
    p = c + R @ r0
    tangent = unit(np.cross(n, p - c))
    return p, tangent


def pregrasp_pose(world: SimWorld, arm: Arm, point, tangent, params: GraspParams) -> RigidTransform:
    """Jaws pointing down ``descent`` above ``point``, closing across the
    wire; the wrist is the nearest one the arm reaches."""
    z = np.array([0.0, 0.0, -1.0])
    y = np.asarray(tangent, float)
    y = unit(y - np.dot(y, z) * z)
    if np.dot(y, world.commanded(arm).rotation[:, 1]) < 0:
        y = -y
    R = np.column_stack([np.cross(y, z), y, z])
    goal = RigidTransform(R, np.asarray(point, float) + params.descent * np.array([0.0, 0.0, 1.0]))
    try:
        sol = ik_solve(world.scene.arms[arm], goal, PREGRASP_TOL)
    except Unreachable as exc:
        raise PositioningFailed(f"receiving wrist cannot reach the pre-grasp: {exc}") from exc
    return RigidTransform(sol.pose.rotation, goal.translation)


@dataclass
class GraspResult:
    check: GraspCheck
    x: AxisServoResult
    y: AxisServoResult


def execute_grasp(world: SimWorld, arm: Arm, params: GraspParams = GraspParams(),
                  estimate: NeedleStateEstimate | None = None, x_policy: AxisPolicy | None = None,
                  y_policy: AxisPolicy | None = None) -> GraspResult:
    """Receive the needle with ``arm``: pre-grasp above the estimated grasp
    point, servo x then y, descend, close, then the holder lets go.

    Raises GraspMissed (mode "X" or "Y") if no needle point is inside the
    jaw at closing, or MaxStepsExceeded from an axis servo.
    """
    holder = world.holder
    if holder is None or holder is arm:
        raise ValueError("the other arm must hold the needle")
    if estimate is None:
        estimate = exact_estimator(world, holder)
    x_policy = x_policy or oracle_policy(Axis.X, world, flip_rate=0.0)
    y_policy = y_policy or oracle_policy(Axis.Y, world, flip_rate=0.0)
    point, tangent = grasp_target(estimate)
    world.step(ActionCommand.single(arm, pregrasp_pose(world, arm, point, tangent, params), 0))
    rx = servo_axis(world, arm, x_policy, params)
    ry = servo_axis(world, arm, y_policy, params)
    pose = world.commanded(arm)
    down = RigidTransform(pose.rotation, pose.translation - params.descent * np.array([0.0, 0.0, 1.0]))
    world.step(ActionCommand.single(arm, down, 0))
    world.step(ActionCommand.single(arm, down, 1))
    check = adjudicate_grasp(world, arm, attach=True)
    log.debug("grasp x=%d moves y=%d moves residual=%s", rx.moves, ry.moves, np.round(check.residual * 1e3, 2))
    if not check.success:
        raise GraspMissed(f"needle outside the jaw (mode {check.mode})", check.mode, check.residual)
    world.step(ActionCommand.single(holder, world.commanded(holder), 0))
    return GraspResult(check, rx, ry)


# ------------------------------------------------------------ demo source


def handover_ready_world(config: StartConfig, radius: float, seed: int = 0,
                         scene: Scene | None = None) -> SimWorld:
    """Noise-free world with the needle already flat at the workspace
    center, tip toward the receiving arm (placed directly, no servoing)."""
    world = make_world(config, radius, seed, NoiseSettings.zero(), scene or build_scene())
    holder = world.holder
    est = exact_estimator(world, holder)
    center = world.scene.arms[holder].workspace_center
    toward = world.commanded(holder.other).translation - center
    toward[2] = 0.0
    goal, _ = handover_goals(est, world.commanded(holder), center, toward)
    world.move(holder, goal)
    return world


def generate_demos(axis: Axis, n: int, seed: int = 0, radius: float = 0.0125,
                   max_offset: float = 0.003, min_offset: float = 0.0002, block: int = 10):
    """Labelled crops from receiving-arm poses offset along ``axis`` (and
    randomly along the other table axis) around the pre-grasp pose. The
    label is the direction that reduces the offset."""
    scene = build_scene()
    configs = all_configs()
    rng = np.random.Generator(np.random.Philox(seed))
    observe = observe_crop(axis, block)
    params = GraspParams()
    bases = {}
    demos = []
    for i in range(n):
        cfg = configs[i % len(configs)]
        if cfg.key not in bases:
            world = handover_ready_world(cfg, radius, seed, scene)
            receiver = world.holder.other
            point, tangent = grasp_target(exact_estimator(world, world.holder))
            bases[cfg.key] = (world, receiver, pregrasp_pose(world, receiver, point, tangent, params))
        world, receiver, base = bases[cfg.key]
        along = rng.uniform(min_offset, max_offset) * (1.0 if rng.random() < 0.5 else -1.0)
        across = rng.uniform(-max_offset, max_offset)
        other = Axis.Y if axis is Axis.X else Axis.X
        offset = along * axis.vector + across * other.vector
        world.move(receiver, RigidTransform(base.rotation, base.translation + offset))
        demos.append((observe(world, receiver, i), -1 if along > 0 else 1))
    return demos
