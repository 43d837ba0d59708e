import numpy as np
import pytest

from fleetslam.lie import Pose, so3_exp
from fleetslam.preintegration import imu_preintegrate
from fleetslam.residuals import (GRAVITY, bias_walk_residual, gauge_prior_jacobian,
                                 gauge_prior_residual, imu_residual, project,
                                 relative_pose_residual, reprojection_residual)
from fleetslam.types import CameraIntrinsics, ImuSample, KeyframeState, Observation

FD_STEP = 1e-6
FD_TOL = 1e-5


def perturb_pose(T, d):
    return Pose(T.R @ so3_exp(d[:3]), T.t + d[3:6])


def fd_jacobian(f, dim, h=FD_STEP):
    e0 = f(np.zeros(dim))
    J = np.zeros((len(e0), dim))
    for i in range(dim):
        d = np.zeros(dim)
        d[i] = h
        J[:, i] = (f(d) - f(-d)) / (2 * h)
    return J


def assert_fd(J_analytic, f, dim, tol=FD_TOL):
    J_num = fd_jacobian(f, dim)
    err = np.abs(J_analytic - J_num).max() / max(1.0, np.abs(J_num).max())
    assert err < tol, f"jacobian mismatch, rel err {err}"


def rand_state(rng, agent=0, kf=0):
    return KeyframeState(
        pose=Pose(so3_exp(rng.normal(size=3) * 0.6), rng.normal(size=3) * 2),
        velocity=rng.normal(size=3),
        bias_gyro=rng.normal(size=3) * 0.01,
        bias_acc=rng.normal(size=3) * 0.05,
        timestamp=0.0,
        agent_id=agent,
        kf_id=kf,
    )


def state_with(kf, pose=None, velocity=None, bias_gyro=None, bias_acc=None):
    return KeyframeState(
        pose=pose if pose is not None else kf.pose,
        velocity=velocity if velocity is not None else kf.velocity,
        bias_gyro=bias_gyro if bias_gyro is not None else kf.bias_gyro,
        bias_acc=bias_acc if bias_acc is not None else kf.bias_acc,
        timestamp=kf.timestamp, agent_id=kf.agent_id, kf_id=kf.kf_id,
    )


# ------------------------------------------------------------------ project
def test_project_principal_point():
    intr = CameraIntrinsics(400, 400, 320, 240)
    kf = KeyframeState(Pose(), np.zeros(3), np.zeros(3), np.zeros(3), 0.0, 0, 0)
    uv = project(intr, kf, [0, 0, 1.0])
    assert np.allclose(uv, [320, 240])


def test_project_behind_camera():
    intr = CameraIntrinsics(400, 400, 320, 240)
    kf = KeyframeState(Pose(), np.zeros(3), np.zeros(3), np.zeros(3), 0.0, 0, 0)
    assert project(intr, kf, [0, 0, 0.0]) is None


def test_project_hand_pinhole():
    intr = CameraIntrinsics(400, 400, 320, 240)
    kf = KeyframeState(Pose(), np.zeros(3), np.zeros(3), np.zeros(3), 0.0, 0, 0)
    uv = project(intr, kf, [1.0, 0.0, 5.0])
    assert np.allclose(uv, [400.0, 240.0])


# ------------------------------------------------------------- reprojection
def _reproj_setup(rng):
    kf = rand_state(rng)
    intr = CameraIntrinsics(fx=400 + rng.uniform(-50, 50), fy=400, cx=320, cy=240,
                            T_CS=Pose(so3_exp(rng.normal(size=3) * 0.3),
                                      rng.normal(size=3) * 0.1))
    p_cam = np.array([rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(0.5, 8)])
    lm = kf.pose.apply(intr.T_CS.inverse().apply(p_cam))
    return kf, intr, lm


def test_reprojection_zero_at_exact(rng):
    kf, intr, lm = _reproj_setup(rng)
    uv = project(intr, kf, lm)
    obs = Observation(0, 0, uv, b"\0" * 32)
    e, _, _ = reprojection_residual(obs, kf, lm, intr)
    assert np.allclose(e, 0, atol=1e-12)


def test_reprojection_linear_in_measurement(rng):
    kf, intr, lm = _reproj_setup(rng)
    uv = project(intr, kf, lm)
    obs = Observation(0, 0, uv + np.array([1.0, 0.0]), b"\0" * 32)
    e, _, _ = reprojection_residual(obs, kf, lm, intr)
    assert np.allclose(e, [1.0, 0.0], atol=1e-12)


def test_reprojection_behind_camera_flag(rng):
    kf = rand_state(rng)
    intr = CameraIntrinsics(400, 400, 320, 240)
    lm = kf.pose.apply([0.0, 0.0, -1.0])  # behind (camera looks along +z body)
    obs = Observation(0, 0, np.array([0.0, 0.0]), b"\0" * 32)
    assert reprojection_residual(obs, kf, lm, intr) is None


def test_reprojection_jacobians(rng):
    for _ in range(100):
        kf, intr, lm = _reproj_setup(rng)
        obs = Observation(0, 0, rng.uniform(0, 640, size=2), b"\0" * 32)
        e, J_pose, J_lm = reprojection_residual(obs, kf, lm, intr)
        assert_fd(J_pose, lambda d: reprojection_residual(
            obs, state_with(kf, pose=perturb_pose(kf.pose, d)), lm, intr)[0], 6)
        assert_fd(J_lm, lambda d: reprojection_residual(obs, kf, lm + d, intr)[0], 3)


# ------------------------------------------------------------ relative pose
def test_relative_pose_consistent_is_zero(rng):
    for _ in range(50):
        Ti = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 2)
        Tj = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 2)
        e, _, _ = relative_pose_residual(Ti, Tj, Ti.between(Tj))
        assert np.allclose(e, 0, atol=1e-12)


def test_relative_pose_identity_translation():
    e, _, _ = relative_pose_residual(Pose(), Pose(), Pose(np.eye(3), [1, 0, 0]))
    assert np.allclose(e, [0, 0, 0, 1, 0, 0], atol=1e-12)


def test_relative_pose_jacobians(rng):
    for _ in range(100):
        Ti = Pose(so3_exp(rng.normal(size=3) * 0.8), rng.normal(size=3) * 3)
        Tj = Pose(so3_exp(rng.normal(size=3) * 0.8), rng.normal(size=3) * 3)
        delta = Pose(so3_exp(rng.normal(size=3) * 0.5), rng.normal(size=3))
        e, Ji, Jj = relative_pose_residual(Ti, Tj, delta)
        assert_fd(Ji, lambda d: relative_pose_residual(perturb_pose(Ti, d), Tj, delta)[0], 6)
        assert_fd(Jj, lambda d: relative_pose_residual(Ti, perturb_pose(Tj, d), delta)[0], 6)


# -------------------------------------------------------------- imu residual
def simulate_forward(samples, s0):
    """Discrete rollout with the same zero-order-hold model as preintegration."""
    R, p, v = s0.pose.R.copy(), s0.pose.t.copy(), s0.velocity.copy()
    for s in samples:
        a_w = R @ (s.acc - s0.bias_acc) + GRAVITY
        p = p + v * s.dt + 0.5 * a_w * s.dt ** 2
        v = v + a_w * s.dt
        R = R @ so3_exp((s.gyro - s0.bias_gyro) * s.dt)
    return R, p, v


def make_consistent_pair(rng, n=200, dt=0.005):
    s0 = rand_state(rng)
    samples = [ImuSample(rng.normal(size=3) * 2, rng.normal(size=3) * 0.5, dt)
               for _ in range(n)]
    preint = imu_preintegrate(samples, s0.bias_gyro, s0.bias_acc)
    R1, p1, v1 = simulate_forward(samples, s0)
    s1 = KeyframeState(Pose(R1, p1), v1, s0.bias_gyro.copy(), s0.bias_acc.copy(),
                       n * dt, 0, 1)
    return s0, s1, samples, preint


def test_imu_residual_zero_on_consistent(rng):
    s0, s1, _, preint = make_consistent_pair(rng)
    e, _ = imu_residual(s0, s1, preint)
    assert np.abs(e).max() < 1e-9


def test_imu_residual_position_perturbation_isolated(rng):
    s0, s1, _, preint = make_consistent_pair(rng)
    d = np.array([0.1, 0.0, 0.0])
    s1b = state_with(s1, pose=Pose(s1.pose.R, s1.pose.t + d))
    e, _ = imu_residual(s0, s1b, preint)
    assert np.allclose(e[:6], 0, atol=1e-9)  # rotation and velocity rows untouched
    assert np.allclose(e[6:9], s0.pose.R.T @ d, atol=1e-9)


def test_imu_bias_correction_second_order(rng):
    s0, s1, samples, preint = make_consistent_pair(rng)

    def err(scale):
        delta = np.ones(6) * scale
        s0b = state_with(s0, bias_gyro=s0.bias_gyro + delta[:3],
                         bias_acc=s0.bias_acc + delta[3:])
        linearized = imu_residual(s0b, s1, preint)[0]
        re_preint = imu_preintegrate(samples, s0b.bias_gyro, s0b.bias_acc)
        exact = imu_residual(s0b, s1, re_preint)[0]
        return np.linalg.norm(linearized - exact)

    ratio = err(1e-3) / err(1e-4)
    assert 50 < ratio < 200


def test_imu_jacobians(rng):
    for _ in range(100):
        sp = rand_state(rng)
        sc = rand_state(rng, kf=1)
        pre = imu_preintegrate(
            [ImuSample(rng.normal(size=3) * 2, rng.normal(size=3) * 0.5, 0.005)
             for _ in range(40)],
            sp.bias_gyro + rng.normal(size=3) * 0.005,
            sp.bias_acc + rng.normal(size=3) * 0.02,
        )
        e, J = imu_residual(sp, sc, pre)
        assert_fd(J["pose_i"], lambda d: imu_residual(
            state_with(sp, pose=perturb_pose(sp.pose, d)), sc, pre)[0], 6)
        assert_fd(J["vel_i"], lambda d: imu_residual(
            state_with(sp, velocity=sp.velocity + d), sc, pre)[0], 3)
        assert_fd(J["bias_i"], lambda d: imu_residual(
            state_with(sp, bias_gyro=sp.bias_gyro + d[:3],
                       bias_acc=sp.bias_acc + d[3:]), sc, pre)[0], 6)
        assert_fd(J["pose_j"], lambda d: imu_residual(
            sp, state_with(sc, pose=perturb_pose(sc.pose, d)), pre)[0], 6)
        assert_fd(J["vel_j"], lambda d: imu_residual(
            sp, state_with(sc, velocity=sc.velocity + d), pre)[0], 3)


# ---------------------------------------------------------------- bias walk
def test_bias_walk_trivials(rng):
    a = rand_state(rng)
    b = state_with(a)
    assert np.allclose(bias_walk_residual(a, b), 0)
    b2 = state_with(a, bias_gyro=a.bias_gyro + [1e-3, 0, 0])
    e = bias_walk_residual(a, b2)
    assert np.allclose(e, [1e-3, 0, 0, 0, 0, 0])


def test_bias_walk_quadratic_growth(rng):
    a = rand_state(rng)
    W = np.diag([1e4] * 6)
    def cost(scale):
        b = state_with(a, bias_gyro=a.bias_gyro + scale * np.ones(3),
                       bias_acc=a.bias_acc + scale * np.ones(3))
        e = bias_walk_residual(a, b)
        return e @ W @ e
    assert cost(2e-3) == pytest.approx(4 * cost(1e-3), rel=1e-9)


# --------------------------------------------------------------- gauge prior
def test_gauge_prior_trivials(rng):
    kf = rand_state(rng)
    assert np.allclose(gauge_prior_residual(kf, kf.pose), 0, atol=1e-12)
    prior = Pose(kf.pose.R, kf.pose.t - np.array([0.5, 0, 0]))
    e = gauge_prior_residual(kf, prior)
    assert np.allclose(e, [0, 0, 0, 0.5, 0, 0], atol=1e-12)


def test_gauge_prior_jacobian(rng):
    for _ in range(100):
        kf = rand_state(rng)
        prior = Pose(so3_exp(rng.normal(size=3) * 0.3), rng.normal(size=3))
        J = gauge_prior_jacobian(kf, prior)
        assert_fd(J, lambda d: gauge_prior_residual(
            state_with(kf, pose=perturb_pose(kf.pose, d)), prior), 6)
