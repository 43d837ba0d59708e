"""Residual functions for the visual-inertial least-squares problems.

All residuals vanish on exactly-consistent states. Pose Jacobians are taken
with respect to a right-multiplicative perturbation on the rotation
(R <- R Exp(dphi)) and an additive one on the translation (t <- t + dt),
stacked as a 6-vector [dphi, dt].
"""
from __future__ import annotations

import numpy as np

from .lie import Pose, skew, so3_exp, so3_log, so3_right_jacobian, so3_right_jacobian_inv
from .preintegration import PreintegratedImu
from .types import CameraIntrinsics, KeyframeState, Observation

MIN_DEPTH = 0.01

GRAVITY = np.array([0.0, 0.0, -9.81])


def project(intrinsics: CameraIntrinsics, kf: KeyframeState, lm_world) -> np.ndarray | None:
    """Pinhole projection of a world point into the keyframe's camera.

    Returns the pixel, or None when the point falls behind the camera
    (depth <= MIN_DEPTH).
    """
    uv, _, _ = _project_cam(intrinsics, kf.pose, np.asarray(lm_world, dtype=float))
    return uv


def _project_cam(intr: CameraIntrinsics, T_WS: Pose, lm_world):
    """Returns (pixel or None, point in camera frame, point in body frame)."""
    p_body = T_WS.R.T @ (lm_world - T_WS.t)
    p_cam = intr.T_CS.R @ p_body + intr.T_CS.t
    if p_cam[2] <= MIN_DEPTH:
        return None, p_cam, p_body
    u = intr.fx * p_cam[0] / p_cam[2] + intr.cx
    v = intr.fy * p_cam[1] / p_cam[2] + intr.cy
    return np.array([u, v]), p_cam, p_body


def reprojection_residual(
    obs: Observation,
    kf: KeyframeState,
    lm_world,
    intrinsics: CameraIntrinsics,
):
    """Pixel residual z - pi(T_CS T_WS^-1 l) and its Jacobians.

    Returns (e, J_pose (2x6), J_lm (2x3)), or None when the landmark is
    behind the camera.
    """
    lm_world = np.asarray(lm_world, dtype=float)
    uv, p_cam, p_body = _project_cam(intrinsics, kf.pose, lm_world)
    if uv is None:
        return None
    e = np.asarray(obs.pixel, dtype=float) - uv

    x, y, z = p_cam
    d_pi = np.array([
        [intrinsics.fx / z, 0.0, -intrinsics.fx * x / (z * z)],
        [0.0, intrinsics.fy / z, -intrinsics.fy * y / (z * z)],
    ])
    # e = z - pi(...): chain through camera point with a leading minus
    d_e_dpcam = -d_pi
    R_CS = intrinsics.T_CS.R
    Rt = kf.pose.R.T
    d_pbody_dphi = skew(p_body)
    J_pose = np.hstack([d_e_dpcam @ R_CS @ d_pbody_dphi, d_e_dpcam @ R_CS @ (-Rt)])
    J_lm = d_e_dpcam @ R_CS @ Rt
    return e, J_pose, J_lm


def relative_pose_residual(T_i: Pose, T_j: Pose, delta_T_ij: Pose):
    """6-vector residual of a relative-pose measurement delta_T_ij ~ T_i^-1 T_j.

    Rotation row: log(dR_ij R_j^T R_i); translation row: dt_ij - R_i^T (t_j - t_i).
    Returns (e, J_i (6x6), J_j (6x6)).
    """
    Ri, ti = T_i.R, T_i.t
    Rj, tj = T_j.R, T_j.t
    M = delta_T_ij.R @ Rj.T @ Ri
    e_rot = so3_log(M)
    a = Ri.T @ (tj - ti)
    e_trans = delta_T_ij.t - a
    e = np.concatenate([e_rot, e_trans])

    Jr_inv = so3_right_jacobian_inv(e_rot)
    J_i = np.zeros((6, 6))
    J_j = np.zeros((6, 6))
    J_i[0:3, 0:3] = Jr_inv
    J_j[0:3, 0:3] = -Jr_inv @ (Ri.T @ Rj)
    J_i[3:6, 0:3] = -skew(a)
    J_i[3:6, 3:6] = Ri.T
    J_j[3:6, 3:6] = -Ri.T
    return e, J_i, J_j


def imu_residual(
    state_prev: KeyframeState,
    state_curr: KeyframeState,
    preint: PreintegratedImu,
    gravity=GRAVITY,
):
    """9-vector preintegration residual [e_dR; e_dv; e_dp] with Jacobians.

    The pseudo-measurements are first corrected for the bias change of the
    previous keyframe relative to the linearization point. Returns
    (e, jacobians) with jacobians keyed by 'pose_i', 'vel_i', 'bias_i',
    'pose_j', 'vel_j'.
    """
    g = np.asarray(gravity, dtype=float)
    R1, p1 = state_prev.pose.R, state_prev.pose.t
    R2, p2 = state_curr.pose.R, state_curr.pose.t
    v1 = np.asarray(state_prev.velocity, dtype=float)
    v2 = np.asarray(state_curr.velocity, dtype=float)
    dt = preint.dt_total

    dbg = np.asarray(state_prev.bias_gyro, dtype=float) - preint.bias_bar_gyro
    dba = np.asarray(state_prev.bias_acc, dtype=float) - preint.bias_bar_acc
    corr = preint.jac_dR_dbg @ dbg
    dR_corr = preint.delta_R @ so3_exp(corr)
    dv_corr = preint.delta_v + preint.jac_dv_dbg @ dbg + preint.jac_dv_dba @ dba
    dp_corr = preint.delta_p + preint.jac_dp_dbg @ dbg + preint.jac_dp_dba @ dba

    M = dR_corr.T @ R1.T @ R2
    e_R = so3_log(M)
    w_v = v2 - v1 - g * dt
    w_p = p2 - p1 - v1 * dt - 0.5 * g * dt * dt
    e_v = R1.T @ w_v - dv_corr
    e_p = R1.T @ w_p - dp_corr
    e = np.concatenate([e_R, e_v, e_p])

    Jr_inv = so3_right_jacobian_inv(e_R)
    J_pose_i = np.zeros((9, 6))
    J_pose_j = np.zeros((9, 6))
    J_vel_i = np.zeros((9, 3))
    J_vel_j = np.zeros((9, 3))
    J_bias_i = np.zeros((9, 6))

    # rotation rows
    J_pose_i[0:3, 0:3] = -Jr_inv @ (R2.T @ R1)
    J_pose_j[0:3, 0:3] = Jr_inv
    J_bias_i[0:3, 0:3] = -Jr_inv @ M.T @ so3_right_jacobian(corr) @ preint.jac_dR_dbg
    # velocity rows
    J_pose_i[3:6, 0:3] = skew(R1.T @ w_v)
    J_vel_i[3:6, :] = -R1.T
    J_vel_j[3:6, :] = R1.T
    J_bias_i[3:6, 0:3] = -preint.jac_dv_dbg
    J_bias_i[3:6, 3:6] = -preint.jac_dv_dba
    # position rows
    J_pose_i[6:9, 0:3] = skew(R1.T @ w_p)
    J_pose_i[6:9, 3:6] = -R1.T
    J_pose_j[6:9, 3:6] = R1.T
    J_vel_i[6:9, :] = -R1.T * dt
    J_bias_i[6:9, 0:3] = -preint.jac_dp_dbg
    J_bias_i[6:9, 3:6] = -preint.jac_dp_dba

    jacobians = {
        "pose_i": J_pose_i,
        "vel_i": J_vel_i,
        "bias_i": J_bias_i,
        "pose_j": J_pose_j,
        "vel_j": J_vel_j,
    }
    return e, jacobians


def bias_walk_residual(state_prev: KeyframeState, state_curr: KeyframeState) -> np.ndarray:
    """Difference of consecutive bias blocks [bg_k - bg_{k-1}; ba_k - ba_{k-1}]."""
    return np.concatenate([
        np.asarray(state_curr.bias_gyro, dtype=float) - np.asarray(state_prev.bias_gyro, dtype=float),
        np.asarray(state_curr.bias_acc, dtype=float) - np.asarray(state_prev.bias_acc, dtype=float),
    ])


def gauge_prior_residual(first_kf: KeyframeState, prior_pose: Pose) -> np.ndarray:
    """6-vector anchoring the gauge keyframe: [log(Rp^T R); t - tp]."""
    e_rot = so3_log(prior_pose.R.T @ first_kf.pose.R)
    e_t = first_kf.pose.t - prior_pose.t
    return np.concatenate([e_rot, e_t])


def gauge_prior_jacobian(first_kf: KeyframeState, prior_pose: Pose) -> np.ndarray:
    """6x6 Jacobian of gauge_prior_residual w.r.t. the keyframe pose."""
    e_rot = so3_log(prior_pose.R.T @ first_kf.pose.R)
    J = np.zeros((6, 6))
    J[0:3, 0:3] = so3_right_jacobian_inv(e_rot)
    J[3:6, 3:6] = np.eye(3)
    return J
