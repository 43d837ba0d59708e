"""Problem builders for the two server-side optimizations.

Pose-graph optimization (PGO) constrains keyframe poses with relative-pose
residuals over covisibility and loop edges; global bundle adjustment (GBA)
jointly refines poses, velocities, biases and landmarks with reprojection,
preintegrated-IMU, bias-walk and gauge-prior terms.

Parameter block keys: ("pose"|"vel"|"bias", agent_id, kf_id) and
("lm", agent_id, lm_id).
"""
from __future__ import annotations

import numpy as np

from .lie import Pose
from .optimizer import Problem, ResidualGroup, SolverConfig, solve
from .residuals import (
    MIN_DEPTH,
    gauge_prior_jacobian,
    gauge_prior_residual,
    imu_residual,
    relative_pose_residual,
)
from .types import KeyframeState

SIGMA_PX = 1.0
CAUCHY_SCALE_PX = 2.0
GAUGE_INFO = 1e8
PGO_INFO_ROT = 1e4
PGO_INFO_TRANS = 1e2
# loop edges are RANSAC-verified direct measurements (about 2 mrad / 2 cm
# accurate); covisibility edges snapshot the current, possibly drifted,
# estimate and are weighted accordingly weaker
PGO_LOOP_INFO_ROT = 2.5e5
PGO_LOOP_INFO_TRANS = 2.5e3
SIGMA_BIAS_GYRO_WALK = 1e-4
SIGMA_BIAS_ACC_WALK = 1e-3
OUTLIER_THRESHOLD_PX = 3.0
IMU_COV_FLOOR = 1e-14


def pose_key(kf_key):
    return ("pose", kf_key[0], kf_key[1])


def vel_key(kf_key):
    return ("vel", kf_key[0], kf_key[1])


def bias_key(kf_key):
    return ("bias", kf_key[0], kf_key[1])


def lm_key(key):
    return ("lm", key[0], key[1])


def _shim_state(pose, velocity=None, bias=None) -> KeyframeState:
    b = np.zeros(6) if bias is None else bias
    return KeyframeState(
        pose=pose,
        velocity=np.zeros(3) if velocity is None else velocity,
        bias_gyro=b[:3],
        bias_acc=b[3:6],
        timestamp=0.0,
        agent_id=-1,
        kf_id=-1,
    )


class ReprojectionGroup(ResidualGroup):
    """Vectorized batch of pixel residuals z - pi(T_CS T_WS^-1 l).

    Observations whose landmark falls behind the camera at the current
    estimate contribute zero residual and zero Jacobian for that iteration.
    """

    dim = 2

    def __init__(self, entries, sigma_px=SIGMA_PX, loss=("cauchy", CAUCHY_SCALE_PX)):
        # entries: (pose_key, lm_key, pixel, intrinsics)
        self.keys = [(e[0], e[1]) for e in entries]
        self.loss = loss
        n = len(entries)
        self.pixels = np.array([e[2] for e in entries], dtype=float).reshape(n, 2)
        self.fx = np.array([e[3].fx for e in entries])
        self.fy = np.array([e[3].fy for e in entries])
        self.cx = np.array([e[3].cx for e in entries])
        self.cy = np.array([e[3].cy for e in entries])
        self.R_CS = np.stack([e[3].T_CS.R for e in entries])
        self.t_CS = np.stack([e[3].T_CS.t for e in entries])

        self.unique_pose_keys = sorted({e[0] for e in entries})
        self.unique_lm_keys = sorted({e[1] for e in entries})
        p_ix = {k: i for i, k in enumerate(self.unique_pose_keys)}
        l_ix = {k: i for i, k in enumerate(self.unique_lm_keys)}
        self.pose_inv = np.array([p_ix[e[0]] for e in entries])
        self.lm_inv = np.array([l_ix[e[1]] for e in entries])

        W = np.eye(2) / (sigma_px * sigma_px)
        self._info = np.broadcast_to(W, (n, 2, 2))

    def information(self):
        return self._info

    def evaluate(self, values, with_jacobians):
        n = len(self.keys)
        R_ws = np.stack([values[k].R for k in self.unique_pose_keys])[self.pose_inv]
        t_ws = np.stack([values[k].t for k in self.unique_pose_keys])[self.pose_inv]
        lms = np.stack([values[k] for k in self.unique_lm_keys])[self.lm_inv]

        Rt = np.transpose(R_ws, (0, 2, 1))
        p_body = np.einsum("nij,nj->ni", Rt, lms - t_ws)
        p_cam = np.einsum("nij,nj->ni", self.R_CS, p_body) + self.t_CS
        z = p_cam[:, 2]
        valid = z > MIN_DEPTH
        zs = np.where(valid, z, 1.0)

        u = self.fx * p_cam[:, 0] / zs + self.cx
        v = self.fy * p_cam[:, 1] / zs + self.cy
        res = self.pixels - np.stack([u, v], axis=1)
        res[~valid] = 0.0

        if not with_jacobians:
            return res, None

        d_pi = np.zeros((n, 2, 3))
        d_pi[:, 0, 0] = self.fx / zs
        d_pi[:, 0, 2] = -self.fx * p_cam[:, 0] / (zs * zs)
        d_pi[:, 1, 1] = self.fy / zs
        d_pi[:, 1, 2] = -self.fy * p_cam[:, 1] / (zs * zs)
        d_e = -np.einsum("nij,njk->nik", d_pi, self.R_CS)  # (n,2,3) through camera chain

        pb_skew = np.zeros((n, 3, 3))
        pb_skew[:, 0, 1] = -p_body[:, 2]
        pb_skew[:, 0, 2] = p_body[:, 1]
        pb_skew[:, 1, 0] = p_body[:, 2]
        pb_skew[:, 1, 2] = -p_body[:, 0]
        pb_skew[:, 2, 0] = -p_body[:, 1]
        pb_skew[:, 2, 1] = p_body[:, 0]

        J_pose = np.zeros((n, 2, 6))
        J_pose[:, :, 0:3] = d_e @ pb_skew
        J_pose[:, :, 3:6] = -(d_e @ Rt)
        J_lm = d_e @ Rt
        J_pose[~valid] = 0.0
        J_lm[~valid] = 0.0
        return res, [J_pose, J_lm]


class RelativePoseGroup(ResidualGroup):
    """Relative-pose constraints between keyframe pairs (PGO edges).

    Vectorized evaluation; matches relative_pose_residual element-wise."""

    dim = 6

    def __init__(self, edges, info_rot=PGO_INFO_ROT, info_trans=PGO_INFO_TRANS):
        # edges: (pose_key_i, pose_key_j, measurement Pose[, (info_rot, info_trans)])
        self.keys = [(e[0], e[1]) for e in edges]
        self.meas_R = np.stack([e[2].R for e in edges])
        self.meas_t = np.stack([e[2].t for e in edges])
        self.loss = None
        self.unique_keys = sorted({k for pair in self.keys for k in pair})
        ix = {k: i for i, k in enumerate(self.unique_keys)}
        self.i_inv = np.array([ix[a] for a, _ in self.keys])
        self.j_inv = np.array([ix[b] for _, b in self.keys])
        self._info = np.zeros((len(edges), 6, 6))
        for i, e in enumerate(edges):
            rot, trans = e[3] if len(e) > 3 else (info_rot, info_trans)
            self._info[i] = np.diag([rot] * 3 + [trans] * 3)

    def information(self):
        return self._info

    def evaluate(self, values, with_jacobians):
        from .lie import skew_batch, so3_log_batch, so3_right_jacobian_inv_batch

        R_all = np.stack([values[k].R for k in self.unique_keys])
        t_all = np.stack([values[k].t for k in self.unique_keys])
        Ri = R_all[self.i_inv]
        Rj = R_all[self.j_inv]
        ti = t_all[self.i_inv]
        tj = t_all[self.j_inv]

        M = self.meas_R @ np.transpose(Rj, (0, 2, 1)) @ Ri
        e_rot = so3_log_batch(M)
        a = np.einsum("nij,ni->nj", Ri, tj - ti)  # R_i^T (t_j - t_i)
        e_t = self.meas_t - a
        res = np.concatenate([e_rot, e_t], axis=1)
        if not with_jacobians:
            return res, None

        n = len(self.keys)
        Jr_inv = so3_right_jacobian_inv_batch(e_rot)
        J_i = np.zeros((n, 6, 6))
        J_j = np.zeros((n, 6, 6))
        J_i[:, 0:3, 0:3] = Jr_inv
        J_j[:, 0:3, 0:3] = -Jr_inv @ np.transpose(Ri, (0, 2, 1)) @ Rj
        J_i[:, 3:6, 0:3] = -skew_batch(a)
        J_i[:, 3:6, 3:6] = np.transpose(Ri, (0, 2, 1))
        J_j[:, 3:6, 3:6] = -np.transpose(Ri, (0, 2, 1))
        return res, [J_i, J_j]


class ImuGroup(ResidualGroup):
    """Preintegrated IMU constraints between consecutive same-agent keyframes."""

    dim = 9

    def __init__(self, links, gravity):
        # links: (kf_key_prev, kf_key_curr, PreintegratedImu)
        self.keys = [
            (pose_key(a), vel_key(a), bias_key(a), pose_key(b), vel_key(b)) for a, b, _ in links
        ]
        self.preints = [p for _, _, p in links]
        self.gravity = np.asarray(gravity, dtype=float)
        self.loss = None
        infos = []
        for p in self.preints:
            cov = p.covariance + IMU_COV_FLOOR * np.eye(9)
            infos.append(np.linalg.inv(cov))
        self._info = np.stack(infos) if infos else np.zeros((0, 9, 9))

    def information(self):
        return self._info

    def evaluate(self, values, with_jacobians):
        n = len(self.keys)
        res = np.zeros((n, 9))
        jacs = (
            [np.zeros((n, 9, 6)), np.zeros((n, 9, 3)), np.zeros((n, 9, 6)),
             np.zeros((n, 9, 6)), np.zeros((n, 9, 3))]
            if with_jacobians
            else None
        )
        for i, ((pk_i, vk_i, bk_i, pk_j, vk_j), preint) in enumerate(zip(self.keys, self.preints)):
            prev = _shim_state(values[pk_i], values[vk_i], values[bk_i])
            curr = _shim_state(values[pk_j], values[vk_j])
            e, J = imu_residual(prev, curr, preint, self.gravity)
            res[i] = e
            if with_jacobians:
                jacs[0][i] = J["pose_i"]
                jacs[1][i] = J["vel_i"]
                jacs[2][i] = J["bias_i"]
                jacs[3][i] = J["pose_j"]
                jacs[4][i] = J["vel_j"]
        return res, jacs


class BiasWalkGroup(ResidualGroup):
    """Random-walk penalty on bias changes between consecutive keyframes."""

    dim = 6

    def __init__(self, links, sigma_bg=SIGMA_BIAS_GYRO_WALK, sigma_ba=SIGMA_BIAS_ACC_WALK):
        # links: (kf_key_prev, kf_key_curr, dt_seconds)
        self.keys = [(bias_key(a), bias_key(b)) for a, b, _ in links]
        self.loss = None
        infos = []
        for _, _, dt in links:
            dt = max(float(dt), 1e-6)
            w = [1.0 / (sigma_bg * sigma_bg * dt)] * 3 + [1.0 / (sigma_ba * sigma_ba * dt)] * 3
            infos.append(np.diag(w))
        self._info = np.stack(infos) if infos else np.zeros((0, 6, 6))
        self._J = None

    def information(self):
        return self._info

    def evaluate(self, values, with_jacobians):
        n = len(self.keys)
        res = np.zeros((n, 6))
        for i, (ka, kb) in enumerate(self.keys):
            res[i] = values[kb] - values[ka]
        if not with_jacobians:
            return res, None
        if self._J is None:
            eye = np.eye(6)
            self._J = [np.broadcast_to(-eye, (n, 6, 6)), np.broadcast_to(eye, (n, 6, 6))]
        return res, self._J


class GaugePriorGroup(ResidualGroup):
    """6-DoF prior pinning the gauge keyframe's pose."""

    dim = 6

    def __init__(self, key, prior_pose: Pose, info=GAUGE_INFO):
        self.keys = [(key,)]
        self.prior = prior_pose.copy()
        self.loss = None
        self._info = (info * np.eye(6)).reshape(1, 6, 6)

    def information(self):
        return self._info

    def evaluate(self, values, with_jacobians):
        state = _shim_state(values[self.keys[0][0]])
        res = gauge_prior_residual(state, self.prior).reshape(1, 6)
        if not with_jacobians:
            return res, None
        return res, [gauge_prior_jacobian(state, self.prior).reshape(1, 6, 6)]


def _ordered_kf_keys(smap):
    """Canonical ordering of the keyframe set (timestamp, then key)."""
    return sorted(smap.keyframes, key=lambda k: (smap.keyframes[k].state.timestamp, k))


def build_pgo_problem(smap) -> Problem:
    """Relative-pose problem over E (covisibility) and Q (loop) edges.

    Covisibility measurements are snapshotted from the current estimates at
    build time; loop measurements come from place recognition. One residual
    per unordered pair, earliest keyframe held constant, poses only.
    """
    if len(smap.keyframes) < 2:
        raise ValueError("PGO needs at least two keyframes")
    if not smap.loop_edges:
        raise ValueError("PGO needs at least one loop edge")

    order = _ordered_kf_keys(smap)
    rank = {k: i for i, k in enumerate(order)}

    problem = Problem()
    for k in order:
        problem.add_pose_block(pose_key(k), smap.keyframes[k].state.pose)
    problem.set_constant(pose_key(order[0]))

    covis_w = (PGO_INFO_ROT, PGO_INFO_TRANS)
    loop_w = (PGO_LOOP_INFO_ROT, PGO_LOOP_INFO_TRANS)
    edges = {}
    for (ka, kb) in smap.covisibility:
        i, j = (ka, kb) if rank[ka] < rank[kb] else (kb, ka)
        Ti = smap.keyframes[i].state.pose
        Tj = smap.keyframes[j].state.pose
        edges[(i, j)] = (Ti.between(Tj), covis_w)
    for edge in smap.loop_edges:
        q, c = edge.key_query, edge.key_candidate
        # measured transform maps query-frame points into the candidate frame
        if rank[c] < rank[q]:
            edges[(c, q)] = (edge.T_cq.copy(), loop_w)
        else:
            edges[(q, c)] = (edge.T_cq.inverse(), loop_w)

    entries = [(pose_key(i), pose_key(j), meas, w) for (i, j), (meas, w) in edges.items()]
    problem.add_group(RelativePoseGroup(entries))
    return problem


def build_gba_problem(smap, gravity=None, sigma_px=SIGMA_PX) -> Problem:
    """Full visual-inertial problem: gauge prior, robust reprojection terms,
    and IMU + bias-walk terms between consecutive same-agent keyframes."""
    if not smap.keyframes:
        raise ValueError("GBA needs a nonempty map")
    if gravity is None:
        from .residuals import GRAVITY

        gravity = GRAVITY

    order = _ordered_kf_keys(smap)
    problem = Problem()
    for k in order:
        rec = smap.keyframes[k]
        problem.add_pose_block(pose_key(k), rec.state.pose)
        problem.add_vector_block(vel_key(k), rec.state.velocity)
        problem.add_vector_block(
            bias_key(k), np.concatenate([rec.state.bias_gyro, rec.state.bias_acc])
        )
    for k, lm in smap.landmarks.items():
        problem.add_vector_block(lm_key(k), lm.position, eliminated=True)

    gauge = order[0]
    problem.add_group(GaugePriorGroup(pose_key(gauge), smap.keyframes[gauge].state.pose))

    entries = []
    for k in order:
        rec = smap.keyframes[k]
        for lk, obs in rec.observations.items():
            entries.append((pose_key(k), lm_key(lk), obs.pixel, rec.intrinsics))
    if entries:
        problem.add_group(ReprojectionGroup(entries, sigma_px=sigma_px))

    imu_links = []
    walk_links = []
    for k in order:
        rec = smap.keyframes[k]
        if rec.imu_link is None:
            continue
        prev_key, preint = rec.imu_link
        if prev_key not in smap.keyframes or prev_key[0] != k[0]:
            continue
        imu_links.append((prev_key, k, preint))
        walk_links.append((prev_key, k, preint.dt_total))
    if imu_links:
        problem.add_group(ImuGroup(imu_links, gravity))
        problem.add_group(BiasWalkGroup(walk_links))
    return problem


def apply_gba_result(smap, problem: Problem):
    """Write optimized poses, velocities, biases and landmarks back to the map."""
    for k, rec in smap.keyframes.items():
        rec.state.pose = problem.value(pose_key(k))
        rec.state.velocity = np.array(problem.value(vel_key(k)))
        bias = problem.value(bias_key(k))
        rec.state.bias_gyro = np.array(bias[:3])
        rec.state.bias_acc = np.array(bias[3:6])
    for k, lm in smap.landmarks.items():
        lm.position = np.array(problem.value(lm_key(k)))


def propagate_landmarks(smap, poses_before: dict, poses_after: dict):
    """Move landmarks by the correction of their reference keyframe; rotate
    keyframe velocities by the keyframe's own rotation correction."""
    corrections = {}
    for k, before in poses_before.items():
        if k in poses_after:
            corrections[k] = poses_after[k].compose(before.inverse())

    for k, rec in smap.keyframes.items():
        corr = corrections.get(k)
        if corr is not None:
            rec.state.velocity = corr.R @ np.asarray(rec.state.velocity, dtype=float)

    for lkey, lm in smap.landmarks.items():
        ref = smap.landmark_reference_kf(lkey)
        if ref is None:
            continue
        corr = corrections.get(ref)
        if corr is not None:
            lm.position = corr.apply(lm.position)


def apply_pgo_result(smap, problem: Problem, poses_before: dict):
    """Write optimized poses back and propagate landmarks/velocities."""
    poses_after = {}
    for k, rec in smap.keyframes.items():
        rec.state.pose = problem.value(pose_key(k))
        poses_after[k] = rec.state.pose
    propagate_landmarks(smap, poses_before, poses_after)


def remove_outlier_observations(smap, threshold_px=OUTLIER_THRESHOLD_PX) -> int:
    """Delete observations reprojecting worse than threshold (or behind the
    camera), then prune landmarks that became under-observed."""
    from .residuals import project

    removed = 0
    for k in list(smap.keyframes):
        rec = smap.keyframes[k]
        for lk in list(rec.observations):
            obs = rec.observations[lk]
            lm = smap.landmarks.get(lk)
            if lm is None:
                continue
            uv = project(rec.intrinsics, rec.state, lm.position)
            if uv is None or np.linalg.norm(obs.pixel - uv) > threshold_px:
                smap.remove_observation(k, lk)
                removed += 1
    smap.prune_underobserved_landmarks()
    return removed


def run_pgo(smap, config: SolverConfig | None = None):
    """Build, solve and apply PGO on the map. Returns the solve report."""
    if config is None:
        config = SolverConfig(max_iters=20)
    poses_before = {k: rec.state.pose.copy() for k, rec in smap.keyframes.items()}
    problem = build_pgo_problem(smap)
    report = solve(problem, config)
    apply_pgo_result(smap, problem, poses_before)
    return report


def run_gba(smap, config: SolverConfig | None = None, outlier_threshold_px=OUTLIER_THRESHOLD_PX,
            sigma_px=SIGMA_PX):
    """Build, solve and apply GBA, then drop outlier observations.

    Returns (report, outliers_removed).
    """
    if config is None:
        config = SolverConfig(max_iters=50)
    problem = build_gba_problem(smap, sigma_px=sigma_px)
    report = solve(problem, config)
    apply_gba_result(smap, problem)
    removed = remove_outlier_observations(smap, outlier_threshold_px)
    return report, removed
