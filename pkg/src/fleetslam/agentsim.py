"""Synthetic visual-inertial front-end standing in for an onboard VIO system.

Scene generation produces circular trajectories (yaw tangent to motion,
camera looking at the ground, a small vertical wobble keeping the IMU
excited) over a shared landmark field. The simulated VIO outputs a locally
consistent but drifting keyframe stream with pixel observations, noisy
descriptors and preintegrated IMU factors; the agent client batches it to the
server and consumes drift corrections without ever touching the local map.
"""
from __future__ import annotations

import json
import queue
import socket
import threading
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .lie import Pose, rotation_to_quat, so3_exp, so3_log
from .preintegration import ImuNoise, PreintegratedImu, imu_preintegrate
from .residuals import GRAVITY, project
from .types import CameraIntrinsics, ImuSample, KeyframeState, Observation
from . import wire


@dataclass
class SceneConfig:
    n_agents: int = 1
    radius: float = 20.0
    altitude: float = 12.0
    angular_rate: float = 0.1  # rad/s around the circle
    center_offsets: list | None = None  # per-agent (x, y); default all at origin
    start_phases: list | None = None  # default evenly spaced around the circle
    duration: float = 40.0
    wobble_amplitude: float = 0.5
    wobble_freq_ratio: float = 2.7  # vertical wobble frequency / angular rate

    n_landmarks: int = 1200
    landmark_lower: tuple = (-32.0, -32.0, -2.0)
    landmark_upper: tuple = (32.0, 32.0, 2.0)

    fx: float = 400.0
    fy: float = 400.0
    cx: float = 320.0
    cy: float = 240.0
    image_width: int = 640
    image_height: int = 480

    kf_rate: float = 4.0
    imu_rate: float = 200.0

    sigma_px: float = 0.0
    sigma_gyro: float = 0.0  # rad/s/sqrt(Hz)
    sigma_acc: float = 0.0  # m/s^2/sqrt(Hz)
    sigma_bias_walk_gyro: float = 0.0
    sigma_bias_walk_acc: float = 0.0
    sigma_bias_init_gyro: float = 0.0
    sigma_bias_init_acc: float = 0.0
    descriptor_flip_prob: float = 0.0
    drift_sigma_rot: float = 0.0  # per-keyframe random-walk increments
    drift_sigma_trans: float = 0.0
    # correlation of successive drift increments; VIO drift is smooth, not white
    drift_correlation: float = 0.95

    max_obs_per_kf: int = 60
    min_obs_per_kf: int = 5
    # re-observing a scene point after this many keyframes mints a fresh local
    # landmark id, as short-term VIO data association would
    lm_reuse_window: int = 20
    seed: int = 0

    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy,
                                self.image_width, self.image_height)

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        cfg = SceneConfig()
        for k, v in d.items():
            if not hasattr(cfg, k):
                raise KeyError(f"unknown scene config key {k!r}")
            setattr(cfg, k, tuple(v) if isinstance(getattr(cfg, k), tuple) else v)
        return cfg


class SceneError(Exception):
    pass


@dataclass
class AgentTruth:
    """IMU-rate trajectory samples; positions come from the exact discrete
    rollout of the velocities so the whole pipeline is self-consistent."""

    times: np.ndarray
    rotations: list
    velocities: np.ndarray
    positions: np.ndarray
    kf_stride: int

    def kf_indices(self):
        return range(0, len(self.times), self.kf_stride)


@dataclass
class GroundTruth:
    config: SceneConfig
    agents: list  # AgentTruth per agent
    landmarks: np.ndarray  # (n, 3)
    descriptors: np.ndarray  # (n, 32) uint8


def _circle_rotation(angle):
    # yaw tangent to motion, then flip so the camera axis (body z) points down
    return so3_exp([0.0, 0.0, angle + np.pi / 2]) @ so3_exp([np.pi, 0.0, 0.0])


def generate_scene(config: SceneConfig) -> GroundTruth:
    """Deterministic scene: per-agent circular trajectories and a shared
    uniformly drawn landmark field with canonical descriptors."""
    rng = np.random.default_rng(config.seed)
    lo = np.asarray(config.landmark_lower, dtype=float)
    hi = np.asarray(config.landmark_upper, dtype=float)
    landmarks = rng.uniform(lo, hi, size=(config.n_landmarks, 3))
    descriptors = rng.integers(0, 256, size=(config.n_landmarks, 32), dtype=np.uint8)

    offsets = config.center_offsets or [(0.0, 0.0)] * config.n_agents
    phases = config.start_phases
    if phases is None:
        phases = [2.0 * np.pi * i / config.n_agents for i in range(config.n_agents)]

    imu_dt = 1.0 / config.imu_rate
    stride = int(round(config.imu_rate / config.kf_rate))
    n_steps = int(round(config.duration * config.imu_rate))
    n_steps -= n_steps % stride
    times = np.arange(n_steps + 1) * imu_dt
    w = config.angular_rate
    wf = w * config.wobble_freq_ratio
    r = config.radius

    agents = []
    for a in range(config.n_agents):
        cx, cy = offsets[a]
        phase = phases[a]
        ang = w * times + phase
        vel = np.stack([
            -r * w * np.sin(ang),
            r * w * np.cos(ang),
            config.wobble_amplitude * wf * np.cos(wf * times),
        ], axis=1)
        rotations = [_circle_rotation(angle) for angle in ang]
        pos = np.empty((len(times), 3))
        pos[0] = [cx + r * np.cos(phase), cy + r * np.sin(phase), config.altitude]
        # trapezoid rollout keeps positions exactly consistent with the
        # zero-order-hold IMU model used downstream
        steps = 0.5 * (vel[:-1] + vel[1:]) * imu_dt
        pos[1:] = pos[0] + np.cumsum(steps, axis=0)
        agents.append(AgentTruth(times, rotations, vel, pos, stride))

    gt = GroundTruth(config, agents, landmarks, descriptors)
    _check_visibility(gt)
    return gt


def _visible_landmarks(config, pose: Pose, landmarks):
    """Indices and pixels of landmarks inside the camera frustum."""
    p_body = (landmarks - pose.t) @ pose.R
    z = p_body[:, 2]
    ok = z > 0.5
    uv = np.zeros((len(landmarks), 2))
    zs = np.where(ok, z, 1.0)
    uv[:, 0] = config.fx * p_body[:, 0] / zs + config.cx
    uv[:, 1] = config.fy * p_body[:, 1] / zs + config.cy
    ok &= (uv[:, 0] >= 0) & (uv[:, 0] < config.image_width)
    ok &= (uv[:, 1] >= 0) & (uv[:, 1] < config.image_height)
    return np.where(ok)[0], uv


def _check_visibility(gt: GroundTruth):
    cfg = gt.config
    for a, agent in enumerate(gt.agents):
        for i in agent.kf_indices():
            pose = Pose(agent.rotations[i], agent.positions[i])
            idx, _ = _visible_landmarks(cfg, pose, gt.landmarks)
            if len(idx) < cfg.min_obs_per_kf:
                raise SceneError(
                    f"agent {a} keyframe at t={agent.times[i]:.2f}s sees only "
                    f"{len(idx)} landmarks (need {cfg.min_obs_per_kf}); "
                    "densify the landmark field or adjust the trajectory"
                )


def simulate_imu(gt: GroundTruth, agent_index: int, seed=None):
    """IMU sample stream for one agent.

    Noiseless samples are the exact finite differences of the true rotation
    and velocity sequences (specific force includes gravity compensation);
    noise and biases are layered on per the additive model. Returns
    (samples, true_bias_gyro (n,3), true_bias_acc (n,3)).
    """
    cfg = gt.config
    agent = gt.agents[agent_index]
    rng = np.random.default_rng((cfg.seed, 101, agent_index) if seed is None else seed)
    dt = 1.0 / cfg.imu_rate
    n = len(agent.times) - 1

    bg = rng.normal(0.0, cfg.sigma_bias_init_gyro, 3)
    ba = rng.normal(0.0, cfg.sigma_bias_init_acc, 3)
    sd_g = cfg.sigma_gyro / np.sqrt(dt)
    sd_a = cfg.sigma_acc / np.sqrt(dt)

    samples = []
    bias_g = np.empty((n, 3))
    bias_a = np.empty((n, 3))
    for i in range(n):
        R = agent.rotations[i]
        w_true = so3_log(R.T @ agent.rotations[i + 1]) / dt
        a_true = R.T @ ((agent.velocities[i + 1] - agent.velocities[i]) / dt - GRAVITY)
        gyro = w_true + bg + rng.normal(0.0, sd_g, 3) if sd_g > 0 else w_true + bg
        acc = a_true + ba + rng.normal(0.0, sd_a, 3) if sd_a > 0 else a_true + ba
        samples.append(ImuSample(acc, gyro, dt))
        bias_g[i] = bg
        bias_a[i] = ba
        bg = bg + rng.normal(0.0, cfg.sigma_bias_walk_gyro * np.sqrt(dt), 3)
        ba = ba + rng.normal(0.0, cfg.sigma_bias_walk_acc * np.sqrt(dt), 3)
    return samples, bias_g, bias_a


@dataclass
class LocalKeyframe:
    state: KeyframeState  # drifted local estimate
    true_pose: Pose
    true_velocity: np.ndarray
    observations: list
    preint: PreintegratedImu | None
    new_landmarks: list  # (lm_id, local position, canonical-noisy descriptor)


@dataclass
class LocalStream:
    agent_id: int
    keyframes: list
    intrinsics: CameraIntrinsics


def simulate_vio(gt: GroundTruth, agent_index: int, agent_id: int | None = None):
    """Drift-corrupted local keyframe stream for one agent.

    The local estimate is the truth left-composed with an accumulating
    random-walk pose error; landmarks are reported in the drifted frame of
    their first observer; preintegration runs on the noisy IMU stream at the
    configured (zero) linearization biases.
    """
    cfg = gt.config
    agent = gt.agents[agent_index]
    if agent_id is None:
        agent_id = agent_index
    rng = np.random.default_rng((cfg.seed, 202, agent_index))
    samples, _, _ = simulate_imu(gt, agent_index)
    intr = cfg.intrinsics()
    noise = ImuNoise(sigma_gyro=max(cfg.sigma_gyro, 1e-5),
                     sigma_acc=max(cfg.sigma_acc, 1e-4))

    stride = agent.kf_stride
    error = Pose.identity()
    # scene index -> (local landmark id, keyframe index last seen)
    tracked: dict[int, list] = {}
    next_lm_id = len(gt.landmarks)
    kfs = []
    kf_id = 0
    for i in agent.kf_indices():
        t = float(agent.times[i])
        true_pose = Pose(agent.rotations[i], agent.positions[i])
        true_vel = agent.velocities[i].copy()
        if kf_id == 0:
            # stationary start for the AR(1) drift-rate process
            drift_rate = np.concatenate([
                rng.normal(0.0, cfg.drift_sigma_rot, 3),
                rng.normal(0.0, cfg.drift_sigma_trans, 3),
            ])
        if kf_id > 0 and (cfg.drift_sigma_rot > 0 or cfg.drift_sigma_trans > 0):
            rho = np.clip(cfg.drift_correlation, 0.0, 0.999)
            innov_scale = np.sqrt(1.0 - rho * rho)
            innov = np.concatenate([
                rng.normal(0.0, cfg.drift_sigma_rot * innov_scale, 3),
                rng.normal(0.0, cfg.drift_sigma_trans * innov_scale, 3),
            ])
            drift_rate = rho * drift_rate + innov
            error = error.compose(Pose(so3_exp(drift_rate[:3]), drift_rate[3:]))
        local_pose = error.compose(true_pose)
        state = KeyframeState(
            pose=local_pose,
            velocity=error.R @ true_vel,
            bias_gyro=np.zeros(3),
            bias_acc=np.zeros(3),
            timestamp=t,
            agent_id=agent_id,
            kf_id=kf_id,
        )

        idx, uv = _visible_landmarks(cfg, true_pose, gt.landmarks)
        if len(idx) > cfg.max_obs_per_kf:
            # keep the points nearest the image center: deterministic, and
            # nearby viewpoints then select heavily overlapping subsets
            center = np.array([cfg.cx, cfg.cy])
            d = np.linalg.norm(uv[idx] - center, axis=1)
            idx = np.sort(idx[np.argsort(d)[: cfg.max_obs_per_kf]])
        observations = []
        new_landmarks = []
        for j in idx:
            px = uv[j] + (rng.normal(0.0, cfg.sigma_px, 2) if cfg.sigma_px > 0 else 0.0)
            if not (0 <= px[0] < cfg.image_width and 0 <= px[1] < cfg.image_height):
                continue
            desc = gt.descriptors[j].copy()
            if cfg.descriptor_flip_prob > 0:
                flips = rng.random(256) < cfg.descriptor_flip_prob
                if flips.any():
                    bits = np.unpackbits(desc)
                    bits[flips] ^= 1
                    desc = np.packbits(bits)
            track = tracked.get(int(j))
            if track is not None and kf_id - track[1] <= cfg.lm_reuse_window:
                track[1] = kf_id
                lm_id = track[0]
            else:
                # lost track (or never seen): a duplicate landmark is born in
                # the current drifted frame; only the server can merge them
                lm_id = int(j) if track is None else next_lm_id
                if track is not None:
                    next_lm_id += 1
                tracked[int(j)] = [lm_id, kf_id]
                new_landmarks.append((lm_id, error.apply(gt.landmarks[j]), desc.tobytes()))
            observations.append(Observation(kf_id, lm_id, px, desc.tobytes()))

        preint = None
        if kf_id > 0:
            chunk = samples[i - stride:i]
            preint = imu_preintegrate(chunk, np.zeros(3), np.zeros(3), noise)
        kfs.append(LocalKeyframe(state, true_pose, true_vel, observations, preint,
                                 new_landmarks))
        kf_id += 1
    return LocalStream(agent_id, kfs, intr)


def estimate_T_odom(server_pose: Pose, local_pose: Pose) -> Pose:
    """Drift correction mapping local poses into the server's frame."""
    return server_pose.compose(local_pose.inverse())


def kf_full_record(kf: LocalKeyframe) -> wire.KfFullRecord:
    st = kf.state
    obs = [wire.ObsRecord(o.lm_id, np.asarray(o.pixel, float), o.descriptor)
           for o in kf.observations]
    return wire.KfFullRecord(
        kf_id=st.kf_id,
        timestamp=st.timestamp,
        pose=st.pose,
        velocity=np.asarray(st.velocity, float),
        bias_gyro=np.asarray(st.bias_gyro, float),
        bias_acc=np.asarray(st.bias_acc, float),
        intrinsics=np.array([0.0, 0.0, 0.0, 0.0]),
        observations=obs,
        preint=kf.preint,
    )


def write_tum(path, rows):
    """rows: iterable of (timestamp, Pose)."""
    with open(path, "w") as f:
        for ts, pose in rows:
            q = rotation_to_quat(pose.R)
            t = pose.t
            f.write(f"{ts:.6f} {t[0]:.9f} {t[1]:.9f} {t[2]:.9f} "
                    f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


class AgentSession:
    """Streams a simulated VIO run to the server over the wire protocol.

    Batches are flushed at the batch rate (in simulated time), re-sent after
    reconnects until acknowledged, and drift-correction poses update T_odom
    without ever mutating the local map.
    """

    BATCH_RATE = 5.0
    MAX_IN_FLIGHT = 8  # unacknowledged batches before production throttles

    def __init__(self, config: SceneConfig, agent_index: int, server_addr,
                 agent_id=None, out_dir=None, realtime_rate=0.0, linger=2.0,
                 ground_truth: GroundTruth | None = None):
        self.config = config
        self.agent_index = agent_index
        self.agent_id = agent_index if agent_id is None else agent_id
        self.server_addr = server_addr
        self.out_dir = Path(out_dir) if out_dir else None
        self.realtime_rate = realtime_rate
        self.linger = linger
        self.gt = ground_truth if ground_truth is not None else generate_scene(config)
        self.stream = simulate_vio(self.gt, agent_index, self.agent_id)

        self.T_odom = Pose.identity()
        self.t_odom_history = []
        # per-keyframe live pose: corrected by the first T_odom at or after
        # the keyframe's production (pure output transform, local map untouched)
        self._live_corrected: list = []
        self._corrected_upto = 0
        self.drift_poses_received = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self._sent_batches: list[bytes] = []
        self._acked = 0
        self._send_cursor = 0
        self._inbox: queue.Queue = queue.Queue()
        self._sock = None
        self._reader = None
        self._log = {"sent_kf_ids": [], "events": []}

    # ------------------------------------------------------------ networking
    def _connect(self):
        """(Re)connect with exponential backoff; the HELLO ack tells us how
        many of our batches this server instance has already applied."""
        backoff = 0.1
        while True:
            try:
                sock = socket.create_connection(self.server_addr, timeout=10.0)
                if sock.getsockname() == sock.getpeername():
                    # TCP self-connect: our ephemeral port landed on the
                    # server's port while it was down; back off and retry
                    sock.close()
                    raise OSError("self-connect")
                sock.settimeout(None)
                self._sock = sock
                self._inbox = queue.Queue()
                self._reader = threading.Thread(
                    target=self._reader_loop, args=(sock,), daemon=True
                )
                self._reader.start()
                self._send_raw(wire.encode_message(wire.Hello(self.agent_id)))
                applied = self._wait_ack(timeout=5.0)
                if applied is None:
                    sock.close()
                    raise OSError("no hello ack")
                # the connected server's count is authoritative for durability
                self._acked = min(applied, len(self._sent_batches))
                self._send_cursor = self._acked
                return
            except OSError:
                time.sleep(backoff)
                backoff = min(backoff * 2.0, 2.0)

    def _reader_loop(self, sock):
        stream = sock.makefile("rb")
        inbox = self._inbox
        try:
            while True:
                msg = wire.read_message(stream)
                if msg is None:
                    break
                inbox.put(msg)
        except (OSError, ValueError, wire.DecodeError):
            pass
        inbox.put(None)

    def _send_raw(self, blob: bytes):
        self._sock.sendall(blob)
        self.bytes_sent += len(blob)

    def _wait_ack(self, timeout):
        """Consume inbound messages until an ack arrives; returns its count."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            try:
                msg = self._inbox.get(timeout=max(0.01, deadline - time.monotonic()))
            except queue.Empty:
                return None
            if msg is None:
                return None
            if self._handle_inbound(msg) == "ack":
                return msg.applied_count
        return None

    def _handle_inbound(self, msg):
        self.bytes_received += len(wire.encode_message(msg))
        if isinstance(msg, wire.Ack):
            self._acked = max(self._acked, msg.applied_count)
            return "ack"
        if isinstance(msg, wire.DriftPose):
            self.drift_poses_received += 1
            kf = next((k for k in self.stream.keyframes
                       if k.state.kf_id == msg.kf_id), None)
            if kf is not None:
                self.T_odom = estimate_T_odom(msg.pose, kf.state.pose)
                self.t_odom_history.append((msg.kf_id, self.T_odom.copy()))
                # keyframes produced since the previous update are "current":
                # their live pose gets this correction
                kfs = self.stream.keyframes
                while self._corrected_upto < len(self._live_corrected):
                    i = self._corrected_upto
                    st = kfs[i].state
                    self._live_corrected[i] = (st.timestamp, self.T_odom.compose(st.pose))
                    self._corrected_upto += 1
            return "drift"
        return "other"

    def _drain_inbox(self) -> bool:
        """Process everything pending; True when the connection dropped."""
        while True:
            try:
                msg = self._inbox.get_nowait()
            except queue.Empty:
                return False
            if msg is None:
                return True
            self._handle_inbound(msg)

    def _pump_inbox(self, timeout):
        """Handle one inbound message (or a disconnect, by reconnecting)."""
        try:
            msg = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return
        if msg is None:
            self._connect()
            self._ensure_sent()
            return
        self._handle_inbound(msg)

    def _ensure_sent(self):
        while self._send_cursor < len(self._sent_batches):
            blob = self._sent_batches[self._send_cursor]
            try:
                self._send_raw(blob)
                self._send_cursor += 1
            except OSError:
                self._connect()

    # ------------------------------------------------------------- main loop
    def run(self):
        """Full session: stream all keyframes, linger for late drift poses,
        say goodbye, write trajectories and the session log."""
        journal = wire.ChangeJournal(self.agent_id)
        self._connect()
        flush_dt = 1.0 / self.BATCH_RATE
        kfs = self.stream.keyframes
        n_flushes = 0
        next_kf = 0
        sim_t = 0.0
        wall_start = time.monotonic()

        while next_kf < len(kfs):
            sim_t = round(sim_t + flush_dt, 9)
            while next_kf < len(kfs) and kfs[next_kf].state.timestamp <= sim_t + 1e-9:
                kf = kfs[next_kf]
                for lm_id, pos, desc in kf.new_landmarks:
                    journal.add_landmark(wire.LmFullRecord(lm_id, pos, desc))
                journal.add_keyframe(kf_full_record(kf))
                self._log["sent_kf_ids"].append(kf.state.kf_id)
                self._live_corrected.append(
                    (kf.state.timestamp, self.T_odom.compose(kf.state.pose)))
                next_kf += 1
            batch = journal.flush()
            n_flushes += 1
            if batch is not None:
                self._sent_batches.append(wire.encode_message(batch))
            self._ensure_sent()
            if self._drain_inbox():
                self._connect()
                self._ensure_sent()
            # bounded in-flight window: do not outrun the server
            while len(self._sent_batches) - self._acked > self.MAX_IN_FLIGHT:
                self._pump_inbox(timeout=0.5)
            if self.realtime_rate > 0:
                target = wall_start + sim_t / self.realtime_rate
                delay = target - time.monotonic()
                if delay > 0:
                    time.sleep(delay)

        self._finish()
        self._log["flush_opportunities"] = n_flushes
        self._log["batches_sent"] = len(self._sent_batches)
        if self.out_dir:
            self._write_outputs()
        return self._log

    def _finish(self):
        # wait until every batch is acknowledged, then linger for drift poses
        deadline = time.monotonic() + 60.0
        while self._acked < len(self._sent_batches) and time.monotonic() < deadline:
            self._ensure_sent()
            self._pump_inbox(timeout=0.5)
        linger_end = time.monotonic() + self.linger
        while time.monotonic() < linger_end:
            try:
                msg = self._inbox.get(timeout=max(0.01, linger_end - time.monotonic()))
            except queue.Empty:
                break
            if msg is None:
                break
            self._handle_inbound(msg)
        try:
            self._send_raw(wire.encode_message(wire.Bye(self.agent_id)))
            self._sock.close()
        except OSError:
            pass

    # ------------------------------------------------------------- reporting
    def raw_trajectory(self):
        return [(k.state.timestamp, k.state.pose) for k in self.stream.keyframes]

    def corrected_trajectory(self):
        """Live corrected stream: each pose uses the correction held when the
        keyframe was produced (the local map itself is never modified)."""
        return list(self._live_corrected)

    def true_trajectory(self):
        return [(k.state.timestamp, k.true_pose) for k in self.stream.keyframes]

    def _write_outputs(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        aid = self.agent_id
        write_tum(self.out_dir / f"agent{aid}_raw.tum", self.raw_trajectory())
        write_tum(self.out_dir / f"agent{aid}_corrected.tum", self.corrected_trajectory())
        write_tum(self.out_dir / f"agent{aid}_gt.tum", self.true_trajectory())
        self._log.update({
            "agent_id": aid,
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "drift_poses_received": self.drift_poses_received,
            "n_keyframes": len(self.stream.keyframes),
        })
        with open(self.out_dir / f"agent{aid}_session.json", "w") as f:
            json.dump(self._log, f, indent=2)
