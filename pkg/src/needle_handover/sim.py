"""Deterministic desk-scale world: two grippers, an arc needle, a stereo rig
and an overhead camera.

World frame: table plane ``z = 0`` with ``+z`` up, the arms sit at ``-x``
(left) and ``+x`` (right), the stereo rig looks along ``+y`` and slightly
down, the overhead camera looks straight down.
"""

from __future__ import annotations

import enum
import itertools
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    CameraModel,
    Circle3,
    RigidTransform,
    StereoRig,
    axis_rotation,
    compose,
    invert,
    rot_x,
    unit,
)
from .kinematics import Arm, ArmModel, GripperState, NoiseModel, apply_noise
from .perception import SegMask

ROTATION_BINS = 7
BIN_STEP = np.pi / 6


class Face(enum.Enum):
    Towards = "towards"
    Away = "away"


class Grip(enum.Enum):
    Tip = "tip"
    Inward30 = "inward30"


class Direction(enum.Enum):
    LeftToRight = "l2r"
    RightToLeft = "r2l"

    @property
    def holder(self) -> Arm:
        return Arm.Left if self is Direction.LeftToRight else Arm.Right


class Outcome(enum.Enum):
    Success = "Success"
    FailP = "P"
    FailX = "X"
    FailY = "Y"
    Timeout = "Timeout"


@dataclass(frozen=True, order=True)
class StartConfig:
    face: Face
    grip: Grip
    rotation_bin: int

    def __post_init__(self):
        if not (isinstance(self.rotation_bin, (int, np.integer)) and 0 <= self.rotation_bin < ROTATION_BINS):
            raise ValueError(f"rotation_bin must be in 0..{ROTATION_BINS - 1}, got {self.rotation_bin}")

    @property
    def rotation(self) -> float:
        return BIN_STEP * self.rotation_bin

    @property
    def key(self) -> str:
        return f"{self.face.value}-{self.grip.value}-{self.rotation_bin}"

    def sort_key(self):
        return (self.face.value, self.grip.value, self.rotation_bin)


def all_configs() -> list[StartConfig]:
    """The 2 x 2 x 7 start-configuration grid."""
    return [StartConfig(f, g, b) for f, g, b in itertools.product(Face, Grip, range(ROTATION_BINS))]


# ------------------------------------------------------------------ scene


@dataclass(frozen=True)
class SceneSettings:
    fx: float = 1400.0
    fy: float = 1400.0
    width: int = 1280
    height: int = 960
    cx: float | None = None  # principal point; image center when unset
    cy: float | None = None
    baseline: float = 0.06
    view_distance: float = 0.22
    elevation_deg: float = 30.0
    look_at: tuple = (0.0, 0.0, 0.05)
    overhead_f: float = 700.0
    overhead_width: int = 640
    overhead_height: int = 480
    overhead_z: float = 0.30
    workspace_center: tuple = (0.0, 0.0, 0.04)
    home_x: float = 0.03
    pivot_x: float = 0.04
    pivot_z: float = 0.20
    occlusion_radius: float = 0.008
    half_thickness_px: float = 2.0
    arc_spacing: float = 0.001
    capture_half_widths: tuple = (0.005, 0.002, 0.003)


@dataclass(frozen=True, eq=False)
class Scene:
    rig: StereoRig
    overhead: CameraModel
    arms: dict
    homes: dict
    settings: SceneSettings

    @property
    def view_direction(self) -> np.ndarray:
        return self.rig.left.optical_axis


def build_scene(s: SceneSettings = SceneSettings()) -> Scene:
    a = np.radians(s.elevation_deg)
    view = np.array([0.0, np.cos(a), -np.sin(a)])
    look = np.asarray(s.look_at, float)
    center = look - s.view_distance * view
    left_pos = center - 0.5 * s.baseline * np.array([1.0, 0.0, 0.0])
    cx = s.width / 2.0 if s.cx is None else s.cx
    cy = s.height / 2.0 if s.cy is None else s.cy
    left = CameraModel.looking_at(left_pos, left_pos + view, s.fx, s.fy, cx, cy, s.width, s.height)
    rig = StereoRig.rectified(left, s.baseline)
    over_pos = np.array([look[0], look[1], s.overhead_z])
    overhead = CameraModel.looking_at(over_pos, over_pos - [0, 0, 1.0], s.overhead_f, s.overhead_f,
                                      s.overhead_width / 2.0, s.overhead_height / 2.0,
                                      s.overhead_width, s.overhead_height)
    ws = np.asarray(s.workspace_center, float)
    arms, homes = {}, {}
    for arm, sign in ((Arm.Left, -1.0), (Arm.Right, 1.0)):
        pivot = RigidTransform(np.eye(3), [sign * s.pivot_x, look[1], s.pivot_z])
        arms[arm] = ArmModel(arm, pivot, ws)
        # jaws point down, wire axis (gripper y) along the line between arms
        y_g = np.array([-sign, 0.0, 0.0])
        z_g = np.array([0.0, 0.0, -1.0])
        x_g = np.cross(y_g, z_g)
        homes[arm] = RigidTransform(np.column_stack([x_g, y_g, z_g]), [sign * s.home_x, look[1], look[2]])
    return Scene(rig, overhead, arms, homes, s)


# ------------------------------------------------------------------ needle


@dataclass(frozen=True, eq=False)
class ArcNeedle:
    """Needle arc in its own frame: center at the origin, normal ``+z``,
    running counter-clockwise from angle 0 (end A) to ``arc_extent`` (end B).
    ``grasp_arclength`` is the angle of the grasped point measured from end A.
    """

    radius: float
    frame: RigidTransform
    arc_extent: float = np.pi
    grasp_arclength: float = 0.0
    attached_arm: Arm | None = None

    def __post_init__(self):
        if not 0 < self.arc_extent <= 2 * np.pi:
            raise ValueError("arc_extent must be in (0, 2*pi]")
        if not 0 <= self.grasp_arclength <= self.arc_extent + 1e-12:
            raise ValueError("grasp point must lie on the arc")

    @property
    def circle(self) -> Circle3:
        return Circle3(self.frame.translation, self.frame.rotation[:, 2], self.radius)

    def local_point(self, angle):
        a = np.asarray(angle, dtype=np.float64)
        return self.radius * np.stack([np.cos(a), np.sin(a), np.zeros_like(a)], axis=-1)

    def point_at(self, angle) -> np.ndarray:
        return self.frame.apply(self.local_point(angle))

    def tangent_at(self, angle: float) -> np.ndarray:
        return self.frame.rotation @ np.array([-np.sin(angle), np.cos(angle), 0.0])

    def arc_points(self, spacing: float) -> np.ndarray:
        n = max(int(np.ceil(self.arc_extent * self.radius / spacing)), 1)
        return self.point_at(np.linspace(0.0, self.arc_extent, n + 1))

    @property
    def grasp_point(self) -> np.ndarray:
        return self.point_at(self.grasp_arclength)

    @property
    def far_end_angle(self) -> float:
        """Arc end furthest (along the arc) from the grasped point."""
        return 0.0 if self.grasp_arclength > self.arc_extent / 2 else self.arc_extent

    @property
    def tip(self) -> np.ndarray:
        return self.point_at(self.far_end_angle)

    def angle_inward_from_tip(self, delta: float) -> float:
        far = self.far_end_angle
        return far + delta if far == 0.0 else far - delta


def needle_in_hand(config: StartConfig, arm: Arm, radius: float, scene: Scene,
                   arc_extent: float = np.pi):
    """Needle frame relative to the gripper for a start configuration,
    together with the grasp angle.

    The rotation about the wire tangent sweeps the needle plane from
    face-on to the stereo rig (bin 0) through edge-on (bin 3).
    """
    home = scene.homes[arm]
    a = np.radians(scene.settings.elevation_deg)
    face = 1.0 if config.face is Face.Towards else -1.0
    side = 1.0 if arm is Arm.Left else -1.0
    x = np.array([1.0, 0.0, 0.0])
    u0 = np.array([0.0, np.sin(a), np.cos(a)])
    omega = face * side * x
    rho = rot_x(face * config.rotation) @ u0
    grasp = 0.0 if config.grip is Grip.Tip else np.pi / 6
    normal = np.cross(omega, rho)
    e_grasp = -rho
    e_a = axis_rotation(normal, -grasp) @ e_grasp
    R = np.column_stack([e_a, np.cross(normal, e_a), normal])
    center = home.translation + radius * rho
    frame = RigidTransform(R, center)
    return compose(invert(home), frame), grasp


# ------------------------------------------------------------------- world


@dataclass(frozen=True)
class RenderNoise:
    dropout: float = 0.0
    false_positive_rate: float = 0.0  # expected spurious blobs per image
    blob_radius_px: float = 3.0


@dataclass(frozen=True)
class NoiseSettings:
    systematic_sigma: float = 0.001
    jitter_sigma: float = 0.0005
    rot_jitter_sigma: float = np.radians(0.5)
    dropout: float = 0.05
    false_positive_rate: float = 0.0
    label_flip: float = 0.05
    inhand_sigma: float = np.radians(3.0)

    @classmethod
    def zero(cls) -> NoiseSettings:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ObservationBundle:
    left_mask: SegMask
    right_mask: SegMask
    overhead_mask: SegMask


@dataclass
class ActionCommand:
    """Per-arm ``(target pose, jaw)``; ``None`` keeps an arm as it is."""

    left: tuple | None = None
    right: tuple | None = None

    def for_arm(self, arm: Arm):
        return self.left if arm is Arm.Left else self.right

    @classmethod
    def single(cls, arm: Arm, pose: RigidTransform, jaw: int) -> ActionCommand:
        return cls(left=(pose, jaw)) if arm is Arm.Left else cls(right=(pose, jaw))


def derive_seed(seed: int, *stream: int) -> int:
    # the length prefix keeps (s, a) and (s, a, 0) apart; SeedSequence
    # ignores trailing zeros
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, len(stream), *stream])
    return int(ss.generate_state(1, np.uint64)[0])


STREAM_NOISE = {Arm.Left: 1, Arm.Right: 2}
STREAM_RENDER = 3
STREAM_POLICY = 4
STREAM_INHAND = 5
STREAM_RANSAC = 6


@dataclass(eq=False)
class SimWorld:
    scene: Scene
    arms: dict
    noise: dict
    needle: ArcNeedle
    in_hand: RigidTransform | None
    render_noise: RenderNoise
    seed: int
    inhand_sigma: float = 0.0
    clock: int = 0
    move_counter: dict = field(default_factory=lambda: {Arm.Left: 0, Arm.Right: 0})
    handovers: int = 0
    occlusion_radius: float | None = None
    inhand_draws: list = field(default_factory=list)

    @property
    def holder(self) -> Arm | None:
        return self.needle.attached_arm

    @property
    def rig(self) -> StereoRig:
        return self.scene.rig

    def pose(self, arm: Arm) -> RigidTransform:
        return self.arms[arm].actual_pose

    def commanded(self, arm: Arm) -> RigidTransform:
        return self.arms[arm].commanded_pose

    def stream_seed(self, *stream: int) -> int:
        return derive_seed(self.seed, *stream)

    def _sync_needle(self):
        if self.needle.attached_arm is not None and self.in_hand is not None:
            frame = compose(self.arms[self.needle.attached_arm].actual_pose, self.in_hand)
            self.needle = replace(self.needle, frame=frame)

    def step(self, action: ActionCommand) -> SimWorld:
        """Advance one timestep: commanded poses and jaws are applied, moved
        arms receive fresh actuation noise, the held needle follows."""
        for arm in Arm:
            cmd = action.for_arm(arm)
            if cmd is None:
                continue
            pose, jaw = cmd
            state = self.arms[arm]
            if jaw not in (0, 1):
                raise ValueError("jaw must be 0 or 1")
            if pose is not None and pose is not state.commanded_pose:
                self.move_counter[arm] += 1
                actual = apply_noise(pose, self.noise[arm], self.move_counter[arm])
                self.arms[arm] = GripperState(pose, actual, jaw)
            else:
                self.arms[arm] = GripperState(state.commanded_pose, state.actual_pose, jaw)
        self._sync_needle()
        if self.holder is not None and self.arms[self.holder].jaw == 0:
            # holder opened without a successful transfer: needle is dropped
            self.needle = replace(self.needle, attached_arm=None)
            self.in_hand = None
        self.clock += 1
        return self

    def move(self, arm: Arm, pose: RigidTransform) -> SimWorld:
        return self.step(ActionCommand.single(arm, pose, self.arms[arm].jaw))


def make_world(config: StartConfig, needle_radius: float, seed: int,
               noise: NoiseSettings = NoiseSettings(), scene: Scene | None = None,
               direction: Direction = Direction.LeftToRight,
               arc_extent: float = np.pi) -> SimWorld:
    """World with the needle in the holder's hand at its home pose."""
    scene = scene or build_scene()
    holder = direction.holder
    in_hand, grasp = needle_in_hand(config, holder, needle_radius, scene, arc_extent)
    arms, models = {}, {}
    for arm in Arm:
        rng = np.random.Generator(np.random.Philox(derive_seed(seed, STREAM_NOISE[arm])))
        offset = rng.normal(0.0, 1.0, 3) * noise.systematic_sigma
        nm = NoiseModel(offset, noise.jitter_sigma, noise.rot_jitter_sigma, derive_seed(seed, STREAM_NOISE[arm], 1))
        models[arm] = nm
        home = scene.homes[arm]
        arms[arm] = GripperState(home, apply_noise(home, nm, 0), 1 if arm is holder else 0)
    frame = compose(arms[holder].actual_pose, in_hand)
    needle = ArcNeedle(needle_radius, frame, arc_extent, grasp, holder)
    return SimWorld(scene, arms, models, needle, in_hand,
                    RenderNoise(noise.dropout, noise.false_positive_rate), seed,
                    inhand_sigma=noise.inhand_sigma)


# --------------------------------------------------------------- rendering


def _draw_segments(img: np.ndarray, uv: np.ndarray, half: float, value) -> None:
    h, w = img.shape
    for (u0, v0), (u1, v1) in zip(uv[:-1], uv[1:]):
        if not (np.isfinite(u0) and np.isfinite(v0) and np.isfinite(u1) and np.isfinite(v1)):
            continue
        c0 = max(int(np.floor(min(u0, u1) - half)), 0)
        c1 = min(int(np.ceil(max(u0, u1) + half)), w - 1)
        r0 = max(int(np.floor(min(v0, v1) - half)), 0)
        r1 = min(int(np.ceil(max(v0, v1) + half)), h - 1)
        if c0 > c1 or r0 > r1:
            continue
        cols = np.arange(c0, c1 + 1, dtype=np.float64)
        rows = np.arange(r0, r1 + 1, dtype=np.float64)
        du, dv = u1 - u0, v1 - v0
        L2 = du * du + dv * dv
        pu = cols[None, :] - u0
        pv = rows[:, None] - v0
        t = np.clip((pu * du + pv * dv) / L2, 0.0, 1.0) if L2 > 0 else np.zeros((len(rows), len(cols)))
        d2 = (pu - t * du) ** 2 + (pv - t * dv) ** 2
        block = img[r0:r1 + 1, c0:c1 + 1]
        hit = d2 <= half * half
        if np.ndim(value) == 0 and value == 1:
            block[hit] = 1
        else:
            block[hit] = np.maximum(block[hit], value)


def _clear_disk(img: np.ndarray, cam: CameraModel, center, radius: float) -> None:
    uv, z = cam.project_many(np.asarray(center)[None])
    if not (z[0] > 0 and np.isfinite(uv).all()):
        return
    rpx = radius * cam.fx / z[0]
    u, v = uv[0]
    h, w = img.shape
    c0, c1 = max(int(np.floor(u - rpx)), 0), min(int(np.ceil(u + rpx)), w - 1)
    r0, r1 = max(int(np.floor(v - rpx)), 0), min(int(np.ceil(v + rpx)), h - 1)
    if c0 > c1 or r0 > r1:
        return
    cols = np.arange(c0, c1 + 1) - u
    rows = np.arange(r0, r1 + 1) - v
    inside = rows[:, None] ** 2 + cols[None, :] ** 2 <= rpx * rpx
    img[r0:r1 + 1, c0:c1 + 1][inside] = 0


def _foreground_indices(img: np.ndarray) -> np.ndarray:
    # same row-major order as np.flatnonzero, scanning only the bounding box
    rows = np.flatnonzero(img.any(axis=1))
    if rows.size == 0:
        return rows
    cols = np.flatnonzero(img.any(axis=0))
    r, c = np.nonzero(img[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1])
    return (r + rows[0]) * img.shape[1] + (c + cols[0])


def _apply_render_noise(img: np.ndarray, noise: RenderNoise, seed: int) -> None:
    if noise.dropout <= 0 and noise.false_positive_rate <= 0:
        return
    rng = np.random.Generator(np.random.Philox(seed))
    if noise.dropout > 0:
        fg = _foreground_indices(img)
        drop = fg[rng.random(fg.size) < noise.dropout]
        img.ravel()[drop] = 0
    if noise.false_positive_rate > 0:
        h, w = img.shape
        r = noise.blob_radius_px
        for _ in range(rng.poisson(noise.false_positive_rate)):
            u, v = rng.uniform(0, w), rng.uniform(0, h)
            _draw_segments(img, np.array([[u, v], [u, v]]), r, 1)


def render_mask(world: SimWorld, cam: CameraModel, camera_index: int) -> SegMask:
    s = world.scene.settings
    img = np.zeros((cam.height, cam.width), dtype=np.uint8)
    uv, _ = cam.project_many(world.needle.arc_points(s.arc_spacing))
    _draw_segments(img, uv, s.half_thickness_px, 1)
    if world.holder is not None:
        radius = world.occlusion_radius if world.occlusion_radius is not None else s.occlusion_radius
        _clear_disk(img, cam, world.pose(world.holder).translation, radius)
    _apply_render_noise(img, world.render_noise, derive_seed(world.seed, STREAM_RENDER, world.clock, camera_index))
    return SegMask(img)


def render_stereo(world: SimWorld):
    return (render_mask(world, world.rig.left, 0), render_mask(world, world.rig.right, 1))


def render_masks(world: SimWorld) -> ObservationBundle:
    left, right = render_stereo(world)
    return ObservationBundle(left, right, render_mask(world, world.scene.overhead, 2))


def render_view(world: SimWorld, cam: CameraModel, gripper: Arm) -> np.ndarray:
    """Float image for the grasp policies: needle pixels 1.0, the jaw of
    ``gripper`` drawn as a bar along its opening axis at 0.5."""
    img = np.zeros((cam.height, cam.width), dtype=np.float64)
    pose = world.pose(gripper)
    jaw = pose.translation + np.outer([-1.0, 1.0], 0.003 * pose.rotation[:, 0])
    uv, _ = cam.project_many(jaw)
    _draw_segments(img, uv, 3.0, 0.5)
    s = world.scene.settings
    uv, _ = cam.project_many(world.needle.arc_points(s.arc_spacing))
    _draw_segments(img, uv, s.half_thickness_px, 1.0)
    return img


# ------------------------------------------------------------ adjudication


@dataclass
class GraspCheck:
    success: bool
    residual: np.ndarray  # jaw-frame offset of the best needle point
    mode: str | None = None  # "X" / "Y" on failure
    angle: float | None = None  # captured arc angle

    @property
    def distance(self) -> float:
        return float(np.linalg.norm(self.residual))


def adjudicate_grasp(world: SimWorld, grasping_arm: Arm, attach: bool = True) -> GraspCheck:
    """Success iff some needle point lies inside the closing jaw's capture
    box. On success the needle snaps into the jaw (wire along the jaw's
    y-axis) with a seeded in-hand rotation about the wire."""
    hw = np.asarray(world.scene.settings.capture_half_widths, float)
    needle = world.needle
    n = max(int(np.ceil(needle.arc_extent * needle.radius / 1e-4)), 1)
    angles = np.linspace(0.0, needle.arc_extent, n + 1)
    pose = world.pose(grasping_arm)
    local = (needle.point_at(angles) - pose.translation) @ pose.rotation
    ratio = np.abs(local) / hw
    worst = ratio.max(axis=1)
    inside = worst <= 1.0
    if inside.any():
        idx = np.flatnonzero(inside)
        k = idx[np.argmin(np.linalg.norm(local[idx], axis=1))]
        check = GraspCheck(True, local[k], None, float(angles[k]))
        if attach:
            _reattach(world, grasping_arm, float(angles[k]))
        return check
    k = int(np.argmin(worst))
    axis = int(np.argmax(ratio[k, :2])) if ratio[k, :2].max() > 1.0 else 1
    world_axis = pose.rotation[:, axis]
    mode = "X" if abs(world_axis[0]) >= abs(world_axis[1]) else "Y"
    return GraspCheck(False, local[k], mode, float(angles[k]))


def _reattach(world: SimWorld, arm: Arm, angle: float) -> None:
    needle = world.needle
    pose = world.pose(arm)
    q = needle.point_at(angle)
    tangent = needle.tangent_at(angle)
    wire = pose.rotation[:, 1]
    if np.dot(tangent, wire) < 0:
        wire = -wire
    axis = np.cross(tangent, wire)
    s = np.linalg.norm(axis)
    align = axis_rotation(axis, np.arctan2(s, np.dot(tangent, wire))) if s > 1e-12 else np.eye(3)
    rng = np.random.Generator(np.random.Philox(world.stream_seed(STREAM_INHAND, world.handovers)))
    turn = float(rng.normal(0.0, 1.0)) * world.inhand_sigma
    world.inhand_draws.append(turn)
    R = axis_rotation(wire, turn) @ align if turn != 0.0 else align
    # rotate about q, then slide q onto the jaw center
    frame = needle.frame
    new_R = R @ frame.rotation
    new_t = pose.translation + R @ (frame.translation - q)
    new_frame = RigidTransform(new_R, new_t)
    world.needle = replace(needle, frame=new_frame, grasp_arclength=angle, attached_arm=arm)
    world.in_hand = compose(invert(pose), new_frame)
    world.handovers += 1


# ------------------------------------------------------------------ record


@dataclass
class TrialRecord:
    config: StartConfig | None
    outcome: Outcome
    handovers_completed: int
    steps: int
    elapsed: float
    seed: int = 0
    direction: Direction = Direction.LeftToRight
    detail: str = ""
