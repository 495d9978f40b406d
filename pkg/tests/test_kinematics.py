import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from needle_handover.errors import BothUnreachable, Unreachable
from needle_handover.geometry import RigidTransform, axis_rotation, rot_y, rot_z, rotation_distance
from needle_handover.kinematics import (
    Arm,
    ArmModel,
    GripperState,
    NoiseModel,
    apply_noise,
    choose_curvature_config,
    ik_solve,
)

TINY = (1e-6, 1e-6, 1e-6)


@pytest.fixture
def arm(scene):
    return scene.arms[Arm.Left]


def test_arm_other_and_model_invariants(arm):
    assert Arm.Left.other is Arm.Right and Arm.Right.other is Arm.Left
    with pytest.raises(ValueError):
        ArmModel(Arm.Left, arm.base, arm.workspace_center, rotational_dof=6)
    with pytest.raises(ValueError):
        GripperState(RigidTransform.identity(), RigidTransform.identity(), jaw=2)


def test_shaft_frame_points_along_shaft(arm):
    p = arm.workspace_center + np.array([0.01, -0.02, 0.0])
    S = arm.shaft_frame(p)
    assert np.allclose(S.T @ S, np.eye(3), atol=1e-12)
    d = (p - arm.pivot) / np.linalg.norm(p - arm.pivot)
    assert np.allclose(S[:, 2], d)
    with pytest.raises(ValueError):
        arm.shaft_frame(arm.pivot)


def test_apply_noise_examples():
    T = RigidTransform.from_rotvec([0.1, 0.2, 0.3], [0.01, 0.02, 0.03])
    assert apply_noise(T, NoiseModel(), 3) is T
    shifted = apply_noise(T, NoiseModel(systematic_offset=[0.001, 0.0, 0.0]), 3)
    assert np.allclose(shifted.translation - T.translation, [0.001, 0.0, 0.0], atol=1e-15)
    assert np.array_equal(shifted.rotation, T.rotation)
    with pytest.raises(ValueError):
        NoiseModel(jitter_sigma=-1.0)


def test_apply_noise_mean_offset():
    offset = np.array([0.001, -0.0005, 0.0002])
    nm = NoiseModel(offset, 0.0005, 0.0, seed=42)
    T = RigidTransform.identity()
    shifts = np.array([apply_noise(T, nm, i).translation for i in range(10000)])
    assert np.all(np.abs(shifts.mean(axis=0) - offset) < 5e-5)


@given(st.integers(0, 2**32), st.integers(0, 10**6))
def test_apply_noise_is_pure(seed, k):
    nm = NoiseModel(np.zeros(3), 0.0005, 0.01, seed=seed)
    T = RigidTransform.from_rotvec([0.0, 0.5, 0.0], [0.0, 0.0, 0.1])
    a, b = apply_noise(T, nm, k), apply_noise(T, nm, k)
    assert np.array_equal(a.translation, b.translation) and np.array_equal(a.rotation, b.rotation)


def test_ik_reachable_target_is_exact(arm):
    p = arm.workspace_center + np.array([0.005, 0.01, -0.004])
    target = arm.reachable_pose(p, 0.4, -0.7)
    sol = ik_solve(arm, target)
    assert sol.residual < 1e-6
    assert np.all(np.abs(sol.pose.translation - p) <= np.array([0.03, 0.03, 0.04]) + 1e-12)


def grid_min_residual(arm, position, R_target, steps=721):
    """Smallest rotation error over a dense (roll, pitch) grid."""
    S = arm.shaft_frame(position)
    M = S.T @ R_target
    a = np.linspace(-np.pi, np.pi, steps)
    best = np.inf
    for roll in a:
        Rz = rot_z(roll)
        cp, sp = np.cos(a), np.sin(a)
        # W = Rz @ Ry(pitch) for every pitch at once
        Ry = np.zeros((steps, 3, 3))
        Ry[:, 0, 0], Ry[:, 0, 2], Ry[:, 1, 1], Ry[:, 2, 0], Ry[:, 2, 2] = cp, sp, 1.0, -sp, cp
        W = Rz[None] @ Ry
        tr = np.einsum("kij,ij->k", W, M)
        best = min(best, float(np.arccos(np.clip((tr.max() - 1) / 2, -1, 1))))
    return best


def test_ik_missing_dof_matches_grid_search(arm):
    p = arm.workspace_center + np.array([0.0, 0.01, 0.0])
    reach = arm.reachable_pose(p, 0.3, 0.8)
    # spin about the jaw axis: the one direction the wrist cannot produce
    R_t = axis_rotation(reach.rotation[:, 2], np.radians(40.0)) @ reach.rotation
    target = RigidTransform(R_t, p)
    sol = ik_solve(arm, target, TINY)
    oracle = grid_min_residual(arm, p, R_t)
    assert sol.residual > np.radians(1.0)
    assert sol.residual <= oracle + 1e-9
    assert oracle - sol.residual < np.radians(0.5)
    assert rotation_distance(sol.pose.rotation, R_t) == pytest.approx(sol.residual, abs=1e-9)


def test_ik_unreachable_far_away(arm):
    far = RigidTransform(np.eye(3), arm.workspace_center + np.array([1.0, 0.0, 0.0]))
    with pytest.raises(Unreachable):
        ik_solve(arm, far)
    with pytest.raises(ValueError):
        ik_solve(arm, far, (0.0, 0.01, 0.01))


def test_curvature_choice_rules(arm):
    p = arm.workspace_center
    good = arm.reachable_pose(p, 0.2, 0.5)
    far = RigidTransform(good.rotation, p + np.array([1.0, 0.0, 0.0]))
    assert choose_curvature_config(far, good, arm).label == "away"
    assert choose_curvature_config(good, far, arm).label == "toward"
    assert choose_curvature_config(good, good, arm).label == "toward"
    with pytest.raises(BothUnreachable):
        choose_curvature_config(far, far, arm)


def test_curvature_choice_prefers_smaller_residual(arm):
    p = arm.workspace_center
    reach = arm.reachable_pose(p, 0.3, 0.8)
    jaw = reach.rotation[:, 2]
    small = RigidTransform(axis_rotation(jaw, np.radians(5.0)) @ reach.rotation, p)
    large = RigidTransform(axis_rotation(jaw, np.radians(12.0)) @ reach.rotation, p)
    assert choose_curvature_config(large, small, arm, TINY).label == "away"
    assert choose_curvature_config(small, large, arm, TINY).label == "toward"


def test_wrist_rotation_matches_composition(arm):
    p = arm.workspace_center
    R = arm.wrist_rotation(p, 0.7, -0.4)
    assert np.allclose(R, arm.shaft_frame(p) @ rot_z(0.7) @ rot_y(-0.4), atol=1e-14)
