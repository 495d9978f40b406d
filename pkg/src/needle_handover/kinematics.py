"""Two-arm kinematic model with cable-drive positioning error.

Each arm is a remote-center-of-motion tool: the shaft passes through a fixed
pivot (``ArmModel.base``), and a two-joint wrist (roll about the shaft, then
pitch) orients the jaws. Two outer rotations plus the wrist give five
rotational joints; the tool cannot spin about its own jaw axis, so one
rotational direction is only reachable by moving the shaft, i.e. by giving
up some translation accuracy.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import BothUnreachable, Unreachable
from .geometry import (
    RigidTransform,
    rotation_distance,
    rotvec_to_matrix,
)

DEFAULT_TOLERANCE = (0.03, 0.03, 0.04)
UNREACHABLE_ANGLE = np.pi / 2


def _cross(a, b):
    return (a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0])


class Arm(enum.Enum):
    Left = "L"
    Right = "R"

    @property
    def other(self) -> Arm:
        return Arm.Right if self is Arm.Left else Arm.Left


@dataclass(frozen=True, eq=False)
class ArmModel:
    arm_id: Arm
    base: RigidTransform
    workspace_center: np.ndarray
    workspace_half_extents: np.ndarray = field(default_factory=lambda: np.array([0.08, 0.08, 0.06]))
    rotational_dof: int = 5

    def __post_init__(self):
        if self.rotational_dof != 5:
            raise ValueError("arm model has exactly 5 rotational joints")
        object.__setattr__(self, "workspace_center", np.asarray(self.workspace_center, float))
        object.__setattr__(self, "workspace_half_extents", np.asarray(self.workspace_half_extents, float))

    @property
    def pivot(self) -> np.ndarray:
        return self.base.translation

    def shaft_frame(self, position) -> np.ndarray:
        """Rotation whose z-axis runs along the shaft from pivot to tool."""
        # scalar arithmetic: this sits in the IK inner loop
        p = self.base.translation
        dx, dy, dz = position[0] - p[0], position[1] - p[1], position[2] - p[2]
        n = math.sqrt(dx * dx + dy * dy + dz * dz)
        if n == 0.0:
            raise ValueError("tool position coincides with the pivot")
        z = (dx / n, dy / n, dz / n)
        B = self.base.rotation
        x = _cross((B[0, 1], B[1, 1], B[2, 1]), z)
        if math.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2) < 1e-9:
            x = _cross((B[0, 0], B[1, 0], B[2, 0]), z)
        m = math.sqrt(x[0] ** 2 + x[1] ** 2 + x[2] ** 2)
        x = (x[0] / m, x[1] / m, x[2] / m)
        y = _cross(z, x)
        return np.array([[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]])

    def wrist_rotation(self, position, roll: float, pitch: float) -> np.ndarray:
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        # rot_z(roll) @ rot_y(pitch)
        W = np.array([[cr * cp, -sr, cr * sp], [sr * cp, cr, sr * sp], [-sp, 0.0, cp]])
        return self.shaft_frame(position) @ W

    def reachable_pose(self, position, roll, pitch) -> RigidTransform:
        return RigidTransform(self.wrist_rotation(position, roll, pitch), position)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    systematic_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    jitter_sigma: float = 0.0
    rot_jitter_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.jitter_sigma < 0 or self.rot_jitter_sigma < 0:
            raise ValueError("noise sigmas must be non-negative")
        object.__setattr__(self, "systematic_offset", np.asarray(self.systematic_offset, float))

    @property
    def is_zero(self) -> bool:
        return not np.any(self.systematic_offset) and self.jitter_sigma == 0 and self.rot_jitter_sigma == 0


@dataclass(eq=False)
class GripperState:
    commanded_pose: RigidTransform
    actual_pose: RigidTransform
    jaw: int = 0

    def __post_init__(self):
        if self.jaw not in (0, 1):
            raise ValueError("jaw must be 0 (open) or 1 (closed)")


def apply_noise(commanded: RigidTransform, noise: NoiseModel, move_index: int) -> RigidTransform:
    """Commanded pose perturbed by the per-trial offset and per-move jitter;
    a pure function of ``(noise.seed, move_index)``."""
    if noise.is_zero:
        return commanded
    t = commanded.translation + noise.systematic_offset
    R = commanded.rotation
    if noise.jitter_sigma > 0 or noise.rot_jitter_sigma > 0:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([noise.seed, move_index])))
        dt = rng.normal(0.0, 1.0, 3) * noise.jitter_sigma
        dr = rng.normal(0.0, 1.0, 3) * noise.rot_jitter_sigma
        t = t + dt
        if noise.rot_jitter_sigma > 0:
            R = rotvec_to_matrix(dr) @ R
    return RigidTransform(R, t)


# ---------------------------------------------------------------------- IK


@dataclass(eq=False)
class IKSolution:
    pose: RigidTransform
    residual: float  # geodesic rotation error, radians
    roll: float = 0.0
    pitch: float = 0.0


def _feasible_box(arm: ArmModel, target_t, trans_tol):
    lo = np.maximum(target_t - trans_tol, arm.workspace_center - arm.workspace_half_extents)
    hi = np.minimum(target_t + trans_tol, arm.workspace_center + arm.workspace_half_extents)
    return lo, hi


def _starts(arm: ArmModel, position, R_target):
    """Eight deterministic (roll, pitch) seeds: the two analytic solutions
    matching the jaw axis, plus a fixed grid."""
    d = arm.shaft_frame(position).T @ R_target[:, 2]
    pitch = float(np.arccos(np.clip(d[2], -1.0, 1.0)))
    roll = float(np.arctan2(d[1], d[0]))
    seeds = [(roll, pitch), (roll + np.pi, -pitch)]
    seeds += [(a, b) for a in (0.0, np.pi / 2, np.pi) for b in (np.pi / 4, -np.pi / 4)]
    return seeds


def ik_solve(arm: ArmModel, target: RigidTransform, trans_tol=DEFAULT_TOLERANCE,
             max_nfev: int = 200) -> IKSolution:
    """Best-rotation pose whose translation stays in the tolerance box.

    Multi-start least squares over (translation, roll, pitch). A tiny
    translation penalty breaks ties toward the box center.
    """
    tol = np.asarray(trans_tol, dtype=np.float64)
    if np.any(tol <= 0):
        raise ValueError("translation tolerances must be positive")
    t0 = target.translation
    lo, hi = _feasible_box(arm, t0, tol)
    if np.any(lo > hi):
        raise Unreachable("tolerance box does not intersect the arm workspace")
    R_t = target.rotation
    t_start = np.clip(t0, lo, hi)
    span = np.where(hi > lo, hi - lo, 1.0)
    # keep strict interior for the bounded solver
    eps = 1e-12
    lo_b = np.where(hi > lo, lo, lo - eps)
    hi_b = np.where(hi > lo, hi, hi + eps)
    w_t = 1e-3 / span

    def residuals(q):
        R = arm.wrist_rotation(q[:3], q[3], q[4])
        return np.concatenate([(R - R_t).ravel(), w_t * (q[:3] - t_start)])

    best = None
    for roll, pitch in _starts(arm, t_start, R_t):
        x0 = np.concatenate([t_start, [roll, pitch]])
        res = least_squares(
            residuals, x0,
            bounds=(np.concatenate([lo_b, [-np.inf, -np.inf]]), np.concatenate([hi_b, [np.inf, np.inf]])),
            method="trf", xtol=1e-10, ftol=1e-10, gtol=1e-10, max_nfev=max_nfev,
        )
        q = res.x
        R = arm.wrist_rotation(q[:3], q[3], q[4])
        err = rotation_distance(R, R_t)
        key = (round(err, 12), float(np.linalg.norm(q[:3] - t_start)))
        if best is None or key < best[0]:
            best = (key, q, R, err)
        if err < 1e-8:
            # exact rotation: later starts can only shave the tie-break term
            break
    _, q, R, err = best
    t = np.clip(q[:3], lo, hi)
    if err >= UNREACHABLE_ANGLE:
        raise Unreachable(f"best rotation error {np.degrees(err):.1f} deg")
    return IKSolution(RigidTransform(R, t), float(err), float(q[3]), float(q[4]))


@dataclass(eq=False)
class CurvatureChoice:
    label: str  # "toward" or "away" (needle curvature relative to the camera)
    goal: RigidTransform
    solution: IKSolution


def choose_curvature_config(goal_toward: RigidTransform, goal_away: RigidTransform, arm: ArmModel,
                            trans_tol=DEFAULT_TOLERANCE) -> CurvatureChoice:
    """Solve IK for both needle-curvature goals; keep the smaller rotation
    residual, preferring the toward-camera goal on ties."""
    options = []
    for label, goal in (("toward", goal_toward), ("away", goal_away)):
        try:
            options.append(CurvatureChoice(label, goal, ik_solve(arm, goal, trans_tol)))
        except Unreachable:
            pass
    if not options:
        raise BothUnreachable("neither curvature configuration is reachable")
    best = options[0]
    for opt in options[1:]:
        if opt.solution.residual < best.solution.residual - 1e-9:
            best = opt
    return best
