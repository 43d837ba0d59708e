"""Shared domain types: keyframe states, camera model, observations, IMU samples."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import Pose

DESCRIPTOR_BYTES = 32


@dataclass
class KeyframeState:
    """Full per-keyframe state block: pose, velocity and IMU biases."""

    pose: Pose
    velocity: np.ndarray
    bias_gyro: np.ndarray
    bias_acc: np.ndarray
    timestamp: float
    agent_id: int
    kf_id: int

    def copy(self) -> "KeyframeState":
        return KeyframeState(
            pose=self.pose.copy(),
            velocity=np.array(self.velocity, dtype=float),
            bias_gyro=np.array(self.bias_gyro, dtype=float),
            bias_acc=np.array(self.bias_acc, dtype=float),
            timestamp=self.timestamp,
            agent_id=self.agent_id,
            kf_id=self.kf_id,
        )

    @property
    def key(self) -> tuple[int, int]:
        return (self.agent_id, self.kf_id)


@dataclass
class CameraIntrinsics:
    """Pinhole camera with a fixed camera-from-body extrinsic T_CS."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 640
    height: int = 480
    T_CS: Pose = field(default_factory=Pose)

    def as_vector(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy])


@dataclass
class Observation:
    """A single 2D measurement of a landmark from a keyframe."""

    kf_id: int
    lm_id: int
    pixel: np.ndarray
    descriptor: bytes

    def copy(self) -> "Observation":
        return Observation(self.kf_id, self.lm_id, np.array(self.pixel, dtype=float), self.descriptor)


@dataclass
class Landmark:
    """3D scene point with its canonical descriptor."""

    lm_id: int
    position: np.ndarray
    descriptor: bytes
    agent_id: int = 0

    def copy(self) -> "Landmark":
        return Landmark(self.lm_id, np.array(self.position, dtype=float), self.descriptor, self.agent_id)

    @property
    def key(self) -> tuple[int, int]:
        return (self.agent_id, self.lm_id)


@dataclass
class ImuSample:
    """One accelerometer/gyro reading held constant over dt seconds."""

    acc: np.ndarray
    gyro: np.ndarray
    dt: float


def hamming_distance(a: bytes, b: bytes) -> int:
    """Bit-level Hamming distance between two equal-length descriptors."""
    x = np.frombuffer(a, dtype=np.uint8) ^ np.frombuffer(b, dtype=np.uint8)
    return int(np.unpackbits(x).sum())
