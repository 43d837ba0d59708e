"""On-manifold IMU preintegration between consecutive keyframes.

Raw gyro/accelerometer samples are compounded once, at a fixed linearization
bias, into relative pseudo-measurements (delta_R, delta_v, delta_p) together
with first-order bias Jacobians and a 9x9 covariance over the error state
[dtheta, dv, dp]. Gravity is excluded from the deltas and re-injected by the
residual. Bias changes after the fact are absorbed through the stored
Jacobians instead of re-integrating.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import skew, so3_exp, so3_right_jacobian
from .types import ImuSample


@dataclass
class ImuNoise:
    """Continuous-time noise densities (per sqrt(Hz))."""

    sigma_gyro: float = 1.7e-4
    sigma_acc: float = 2.0e-3
    # floor keeps the propagated covariance invertible when simulating noise-free
    sigma_floor_gyro: float = 1e-5
    sigma_floor_acc: float = 1e-4


@dataclass
class PreintegratedImu:
    delta_R: np.ndarray
    delta_v: np.ndarray
    delta_p: np.ndarray
    dt_total: float
    bias_bar_gyro: np.ndarray
    bias_bar_acc: np.ndarray
    jac_dR_dbg: np.ndarray
    jac_dv_dbg: np.ndarray
    jac_dv_dba: np.ndarray
    jac_dp_dbg: np.ndarray
    jac_dp_dba: np.ndarray
    covariance: np.ndarray = field(default_factory=lambda: np.zeros((9, 9)))

    def copy(self) -> "PreintegratedImu":
        return PreintegratedImu(
            delta_R=self.delta_R.copy(),
            delta_v=self.delta_v.copy(),
            delta_p=self.delta_p.copy(),
            dt_total=self.dt_total,
            bias_bar_gyro=self.bias_bar_gyro.copy(),
            bias_bar_acc=self.bias_bar_acc.copy(),
            jac_dR_dbg=self.jac_dR_dbg.copy(),
            jac_dv_dbg=self.jac_dv_dbg.copy(),
            jac_dv_dba=self.jac_dv_dba.copy(),
            jac_dp_dbg=self.jac_dp_dbg.copy(),
            jac_dp_dba=self.jac_dp_dba.copy(),
            covariance=self.covariance.copy(),
        )

    def corrected_deltas(self, bias_gyro, bias_acc):
        """Pseudo-measurements re-linearized at (bias_gyro, bias_acc).

        Applies the stored first-order Jacobians for the bias change relative
        to the linearization point; exact up to O(|db|^2).
        """
        dbg = np.asarray(bias_gyro, dtype=float) - self.bias_bar_gyro
        dba = np.asarray(bias_acc, dtype=float) - self.bias_bar_acc
        dR = self.delta_R @ so3_exp(self.jac_dR_dbg @ dbg)
        dv = self.delta_v + self.jac_dv_dbg @ dbg + self.jac_dv_dba @ dba
        dp = self.delta_p + self.jac_dp_dbg @ dbg + self.jac_dp_dba @ dba
        return dR, dv, dp


def imu_preintegrate(
    samples: list[ImuSample],
    bias_bar_gyro,
    bias_bar_acc,
    noise: ImuNoise | None = None,
) -> PreintegratedImu:
    """Compound IMU samples into a single relative pseudo-measurement.

    Each sample is treated as constant over its dt (zero-order hold). The bias
    Jacobians and the covariance follow the standard first-order recursion of
    the on-manifold preintegration scheme.
    """
    if not samples:
        raise ValueError("imu_preintegrate needs at least one sample")
    if noise is None:
        noise = ImuNoise()
    bg = np.asarray(bias_bar_gyro, dtype=float).reshape(3)
    ba = np.asarray(bias_bar_acc, dtype=float).reshape(3)

    dR = np.eye(3)
    dv = np.zeros(3)
    dp = np.zeros(3)
    J_R_bg = np.zeros((3, 3))
    J_v_bg = np.zeros((3, 3))
    J_v_ba = np.zeros((3, 3))
    J_p_bg = np.zeros((3, 3))
    J_p_ba = np.zeros((3, 3))
    # negligible seed keeps the covariance strictly positive definite even for
    # a single sample, where velocity and position are perfectly correlated
    P = np.eye(9) * 1e-18
    t_total = 0.0

    sg = max(noise.sigma_gyro, noise.sigma_floor_gyro)
    sa = max(noise.sigma_acc, noise.sigma_floor_acc)

    for s in samples:
        dt = float(s.dt)
        if not 0.0 < dt <= 0.1:
            raise ValueError(f"sample dt {dt} outside (0, 0.1]")
        w = np.asarray(s.gyro, dtype=float) - bg
        a = np.asarray(s.acc, dtype=float) - ba
        dtheta = w * dt
        R_incr = so3_exp(dtheta)
        Jr = so3_right_jacobian(dtheta)
        a_skew = skew(a)

        # covariance and bias Jacobians use the pre-update dR
        F = np.eye(9)
        F[0:3, 0:3] = R_incr.T
        F[3:6, 0:3] = -dR @ a_skew * dt
        F[6:9, 0:3] = -0.5 * dR @ a_skew * dt * dt
        F[6:9, 3:6] = np.eye(3) * dt

        # discrete sample noise variance = density^2 / dt
        var_g = sg * sg / dt
        var_a = sa * sa / dt
        G_th = Jr * dt
        G_v = dR * dt
        G_p = 0.5 * dR * dt * dt
        P = F @ P @ F.T
        P[0:3, 0:3] += var_g * (G_th @ G_th.T)
        P[3:6, 3:6] += var_a * (G_v @ G_v.T)
        P[3:6, 6:9] += var_a * (G_v @ G_p.T)
        P[6:9, 3:6] += var_a * (G_p @ G_v.T)
        P[6:9, 6:9] += var_a * (G_p @ G_p.T)

        # position/velocity Jacobians use the pre-update values
        J_p_bg += J_v_bg * dt - 0.5 * dR @ a_skew @ J_R_bg * dt * dt
        J_p_ba += J_v_ba * dt - 0.5 * dR * dt * dt
        J_v_bg += -dR @ a_skew @ J_R_bg * dt
        J_v_ba += -dR * dt
        J_R_bg = R_incr.T @ J_R_bg - Jr * dt

        # state recursion, then book-keeping
        acc_world = dR @ a
        dp = dp + dv * dt + 0.5 * acc_world * dt * dt
        dv = dv + acc_world * dt
        dR = dR @ R_incr
        t_total += dt

    P = 0.5 * (P + P.T)
    return PreintegratedImu(
        delta_R=dR,
        delta_v=dv,
        delta_p=dp,
        dt_total=t_total,
        bias_bar_gyro=bg,
        bias_bar_acc=ba,
        jac_dR_dbg=J_R_bg,
        jac_dv_dbg=J_v_bg,
        jac_dv_dba=J_v_ba,
        jac_dp_dbg=J_p_bg,
        jac_dp_dba=J_p_ba,
        covariance=P,
    )


def chain_preintegrations(first: PreintegratedImu, second: PreintegratedImu) -> PreintegratedImu:
    """Compose two consecutive preintegrated segments into one.

    Used when the keyframe between them is pruned. The second segment is
    first re-linearized at the first segment's bias point, then the deltas,
    bias Jacobians, and covariance are chained.
    """
    dR2, dv2, dp2 = second.corrected_deltas(first.bias_bar_gyro, first.bias_bar_acc)
    dt2 = second.dt_total
    R1 = first.delta_R

    dR = R1 @ dR2
    dv = first.delta_v + R1 @ dv2
    dp = first.delta_p + first.delta_v * dt2 + R1 @ dp2

    # first-order chain rule for the bias Jacobians
    J_R_bg = dR2.T @ first.jac_dR_dbg + second.jac_dR_dbg
    J_v_bg = first.jac_dv_dbg + R1 @ second.jac_dv_dbg - R1 @ skew(dv2) @ first.jac_dR_dbg
    J_v_ba = first.jac_dv_dba + R1 @ second.jac_dv_dba
    J_p_bg = (
        first.jac_dp_dbg
        + first.jac_dv_dbg * dt2
        + R1 @ second.jac_dp_dbg
        - R1 @ skew(dp2) @ first.jac_dR_dbg
    )
    J_p_ba = first.jac_dp_dba + first.jac_dv_dba * dt2 + R1 @ second.jac_dp_dba

    F = np.eye(9)
    F[0:3, 0:3] = dR2.T
    F[3:6, 0:3] = -R1 @ skew(dv2)
    F[6:9, 0:3] = -R1 @ skew(dp2)
    F[6:9, 3:6] = np.eye(3) * dt2
    G = np.zeros((9, 9))
    G[0:3, 0:3] = np.eye(3)
    G[3:6, 3:6] = R1
    G[6:9, 6:9] = R1
    P = F @ first.covariance @ F.T + G @ second.covariance @ G.T
    P = 0.5 * (P + P.T)

    return PreintegratedImu(
        delta_R=dR,
        delta_v=dv,
        delta_p=dp,
        dt_total=first.dt_total + dt2,
        bias_bar_gyro=first.bias_bar_gyro.copy(),
        bias_bar_acc=first.bias_bar_acc.copy(),
        jac_dR_dbg=J_R_bg,
        jac_dv_dbg=J_v_bg,
        jac_dv_dba=J_v_ba,
        jac_dp_dbg=J_p_bg,
        jac_dp_dba=J_p_ba,
        covariance=P,
    )
