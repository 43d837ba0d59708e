"""Binary agent<->server message layer.

Framing: magic "CVNS", msg_type u8, agent_id u32, payload_len u32, payload.
All integers little-endian, all reals IEEE-754 f64. The full layout is
documented in protocol.md; golden-byte fixtures pin it in the test suite.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .lie import Pose
from .preintegration import PreintegratedImu
from .types import DESCRIPTOR_BYTES

MAGIC = b"CVNS"
HEADER = struct.Struct("<4sBII")

MSG_HELLO = 1
MSG_BATCH = 2
MSG_DRIFT_POSE = 3
MSG_BYE = 4
MSG_ACK = 5

_TRIU = np.triu_indices(9)


class DecodeError(Exception):
    """Malformed frame or payload; offset is the byte position of the fault."""

    def __init__(self, message, offset=0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class ObsRecord:
    lm_id: int
    pixel: np.ndarray
    descriptor: bytes


@dataclass
class KfFullRecord:
    kf_id: int
    timestamp: float
    pose: Pose
    velocity: np.ndarray
    bias_gyro: np.ndarray
    bias_acc: np.ndarray
    intrinsics: np.ndarray  # fx, fy, cx, cy
    observations: list[ObsRecord]
    preint: PreintegratedImu | None


@dataclass
class KfUpdateRecord:
    kf_id: int
    pose: Pose
    velocity: np.ndarray
    bias_gyro: np.ndarray
    bias_acc: np.ndarray


@dataclass
class LmFullRecord:
    lm_id: int
    position: np.ndarray
    descriptor: bytes


@dataclass
class LmUpdateRecord:
    lm_id: int
    position: np.ndarray


@dataclass
class Hello:
    agent_id: int


@dataclass
class Bye:
    agent_id: int


@dataclass
class Ack:
    agent_id: int
    applied_count: int


@dataclass
class DriftPose:
    agent_id: int
    kf_id: int
    pose: Pose
    server_timestamp: float


@dataclass
class Batch:
    agent_id: int
    kf_full: list[KfFullRecord] = field(default_factory=list)
    kf_update: list[KfUpdateRecord] = field(default_factory=list)
    lm_full: list[LmFullRecord] = field(default_factory=list)
    lm_update: list[LmUpdateRecord] = field(default_factory=list)

    def is_empty(self) -> bool:
        return not (self.kf_full or self.kf_update or self.lm_full or self.lm_update)


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u16(self, v):
        self.parts.append(struct.pack("<H", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", float(v)))

    def f64s(self, values):
        arr = np.asarray(values, dtype="<f8").ravel()
        self.parts.append(arr.tobytes())

    def raw(self, b: bytes):
        self.parts.append(bytes(b))

    def pose(self, p: Pose):
        self.f64s(p.R.reshape(9))
        self.f64s(p.t)

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, data: bytes, base_offset=0):
        self.data = data
        self.off = 0
        self.base = base_offset

    def _take(self, n) -> bytes:
        if self.off + n > len(self.data):
            raise DecodeError("truncated payload", self.base + self.off)
        b = self.data[self.off : self.off + n]
        self.off += n
        return b

    def u8(self):
        return struct.unpack("<B", self._take(1))[0]

    def u16(self):
        return struct.unpack("<H", self._take(2))[0]

    def u32(self):
        return struct.unpack("<I", self._take(4))[0]

    def f64(self):
        return struct.unpack("<d", self._take(8))[0]

    def f64s(self, n) -> np.ndarray:
        return np.frombuffer(self._take(8 * n), dtype="<f8").astype(float)

    def raw(self, n) -> bytes:
        return bytes(self._take(n))

    def pose(self) -> Pose:
        R = self.f64s(9).reshape(3, 3)
        t = self.f64s(3)
        return Pose(R, t)

    def done(self) -> bool:
        return self.off == len(self.data)


def _write_preint(w: _Writer, p: PreintegratedImu | None):
    if p is None:
        w.u8(0)
        return
    w.u8(1)
    w.f64s(p.delta_R.reshape(9))
    w.f64s(p.delta_v)
    w.f64s(p.delta_p)
    w.f64(p.dt_total)
    w.f64s(p.jac_dR_dbg.reshape(9))
    w.f64s(p.jac_dv_dbg.reshape(9))
    w.f64s(p.jac_dv_dba.reshape(9))
    w.f64s(p.jac_dp_dbg.reshape(9))
    w.f64s(p.jac_dp_dba.reshape(9))
    w.f64s(p.covariance[_TRIU])
    w.f64s(p.bias_bar_gyro)
    w.f64s(p.bias_bar_acc)


def _read_preint(r: _Reader) -> PreintegratedImu | None:
    if r.u8() == 0:
        return None
    dR = r.f64s(9).reshape(3, 3)
    dv = r.f64s(3)
    dp = r.f64s(3)
    dt = r.f64()
    jacs = [r.f64s(9).reshape(3, 3) for _ in range(5)]
    cov = np.zeros((9, 9))
    cov[_TRIU] = r.f64s(45)
    cov = cov + np.triu(cov, 1).T
    bg = r.f64s(3)
    ba = r.f64s(3)
    return PreintegratedImu(
        delta_R=dR,
        delta_v=dv,
        delta_p=dp,
        dt_total=dt,
        bias_bar_gyro=bg,
        bias_bar_acc=ba,
        jac_dR_dbg=jacs[0],
        jac_dv_dbg=jacs[1],
        jac_dv_dba=jacs[2],
        jac_dp_dbg=jacs[3],
        jac_dp_dba=jacs[4],
        covariance=cov,
    )


def _write_kf_full(w: _Writer, rec: KfFullRecord):
    w.u32(rec.kf_id)
    w.f64(rec.timestamp)
    w.pose(rec.pose)
    w.f64s(rec.velocity)
    w.f64s(rec.bias_gyro)
    w.f64s(rec.bias_acc)
    w.f64s(rec.intrinsics)
    w.u32(len(rec.observations))
    for o in rec.observations:
        w.u32(o.lm_id)
        w.f64s(o.pixel)
        if len(o.descriptor) != DESCRIPTOR_BYTES:
            raise ValueError("descriptor must be 32 bytes")
        w.raw(o.descriptor)
    _write_preint(w, rec.preint)


def _read_kf_full(r: _Reader) -> KfFullRecord:
    kf_id = r.u32()
    ts = r.f64()
    pose = r.pose()
    vel = r.f64s(3)
    bg = r.f64s(3)
    ba = r.f64s(3)
    intr = r.f64s(4)
    n_obs = r.u32()
    obs = []
    for _ in range(n_obs):
        lm_id = r.u32()
        px = r.f64s(2)
        desc = r.raw(DESCRIPTOR_BYTES)
        obs.append(ObsRecord(lm_id, px, desc))
    preint = _read_preint(r)
    return KfFullRecord(kf_id, ts, pose, vel, bg, ba, intr, obs, preint)


def _write_kf_update(w: _Writer, rec: KfUpdateRecord):
    w.u32(rec.kf_id)
    w.pose(rec.pose)
    w.f64s(rec.velocity)
    w.f64s(rec.bias_gyro)
    w.f64s(rec.bias_acc)


def _read_kf_update(r: _Reader) -> KfUpdateRecord:
    return KfUpdateRecord(r.u32(), r.pose(), r.f64s(3), r.f64s(3), r.f64s(3))


def _write_lm_full(w: _Writer, rec: LmFullRecord):
    w.u32(rec.lm_id)
    w.f64s(rec.position)
    if len(rec.descriptor) != DESCRIPTOR_BYTES:
        raise ValueError("descriptor must be 32 bytes")
    w.raw(rec.descriptor)


def _read_lm_full(r: _Reader) -> LmFullRecord:
    return LmFullRecord(r.u32(), r.f64s(3), r.raw(DESCRIPTOR_BYTES))


def _write_lm_update(w: _Writer, rec: LmUpdateRecord):
    w.u32(rec.lm_id)
    w.f64s(rec.position)


def _read_lm_update(r: _Reader) -> LmUpdateRecord:
    return LmUpdateRecord(r.u32(), r.f64s(3))


def encode_message(msg) -> bytes:
    """Serialize any message object to one framed byte string."""
    w = _Writer()
    if isinstance(msg, Hello):
        mtype = MSG_HELLO
    elif isinstance(msg, Bye):
        mtype = MSG_BYE
    elif isinstance(msg, Ack):
        mtype = MSG_ACK
        w.u32(msg.applied_count)
    elif isinstance(msg, DriftPose):
        mtype = MSG_DRIFT_POSE
        w.u32(msg.kf_id)
        w.pose(msg.pose)
        w.f64(msg.server_timestamp)
    elif isinstance(msg, Batch):
        mtype = MSG_BATCH
        w.u32(len(msg.kf_full))
        w.u32(len(msg.kf_update))
        w.u32(len(msg.lm_full))
        w.u32(len(msg.lm_update))
        for rec in msg.kf_full:
            _write_kf_full(w, rec)
        for rec in msg.kf_update:
            _write_kf_update(w, rec)
        for rec in msg.lm_full:
            _write_lm_full(w, rec)
        for rec in msg.lm_update:
            _write_lm_update(w, rec)
    else:
        raise TypeError(f"cannot encode {type(msg).__name__}")
    payload = w.getvalue()
    return HEADER.pack(MAGIC, mtype, msg.agent_id, len(payload)) + payload


def decode_message(data: bytes):
    """Parse exactly one framed message from the byte string."""
    if len(data) < HEADER.size:
        raise DecodeError("truncated header", len(data))
    magic, mtype, agent_id, payload_len = HEADER.unpack(data[: HEADER.size])
    if magic != MAGIC:
        raise DecodeError("bad magic", 0)
    if len(data) != HEADER.size + payload_len:
        raise DecodeError("payload length mismatch", HEADER.size)
    return _decode_payload(mtype, agent_id, data[HEADER.size :], HEADER.size)


def _decode_payload(mtype, agent_id, payload: bytes, base):
    r = _Reader(payload, base_offset=base)
    if mtype == MSG_HELLO:
        msg = Hello(agent_id)
    elif mtype == MSG_BYE:
        msg = Bye(agent_id)
    elif mtype == MSG_ACK:
        msg = Ack(agent_id, r.u32())
    elif mtype == MSG_DRIFT_POSE:
        msg = DriftPose(agent_id, r.u32(), r.pose(), r.f64())
    elif mtype == MSG_BATCH:
        n_kf_full = r.u32()
        n_kf_update = r.u32()
        n_lm_full = r.u32()
        n_lm_update = r.u32()
        msg = Batch(agent_id)
        msg.kf_full = [_read_kf_full(r) for _ in range(n_kf_full)]
        msg.kf_update = [_read_kf_update(r) for _ in range(n_kf_update)]
        msg.lm_full = [_read_lm_full(r) for _ in range(n_lm_full)]
        msg.lm_update = [_read_lm_update(r) for _ in range(n_lm_update)]
    else:
        raise DecodeError(f"unknown message type {mtype}", 4)
    if not r.done():
        raise DecodeError("trailing bytes in payload", base + r.off)
    return msg


def read_message(stream):
    """Read one framed message from a file-like byte stream.

    Returns None on clean EOF at a frame boundary.
    """
    head = stream.read(HEADER.size)
    if not head:
        return None
    if len(head) < HEADER.size:
        raise DecodeError("truncated header", len(head))
    magic, mtype, agent_id, payload_len = HEADER.unpack(head)
    if magic != MAGIC:
        raise DecodeError("bad magic", 0)
    payload = stream.read(payload_len) if payload_len else b""
    if len(payload) < payload_len:
        raise DecodeError("truncated payload", HEADER.size + len(payload))
    return _decode_payload(mtype, agent_id, payload, HEADER.size)


class ChangeJournal:
    """Agent-side staging of map changes between batch flushes.

    First appearance of an entity stages a full record; later changes stage
    update records. Unchanged entities are never re-sent. flush() drains the
    staged sets into a Batch (or None when nothing changed).
    """

    def __init__(self, agent_id: int):
        self.agent_id = agent_id
        self._kf_full: dict[int, KfFullRecord] = {}
        self._kf_update: dict[int, KfUpdateRecord] = {}
        self._lm_full: dict[int, LmFullRecord] = {}
        self._lm_update: dict[int, LmUpdateRecord] = {}
        self._kf_sent: set[int] = set()
        self._lm_sent: set[int] = set()

    def add_keyframe(self, record: KfFullRecord):
        if record.kf_id in self._kf_sent or record.kf_id in self._kf_full:
            raise ValueError(f"keyframe {record.kf_id} already journaled")
        self._kf_full[record.kf_id] = record

    def update_keyframe(self, kf_id, pose, velocity, bias_gyro, bias_acc):
        if kf_id in self._kf_full:
            rec = self._kf_full[kf_id]
            rec.pose, rec.velocity = pose, np.asarray(velocity, dtype=float)
            rec.bias_gyro = np.asarray(bias_gyro, dtype=float)
            rec.bias_acc = np.asarray(bias_acc, dtype=float)
        elif kf_id in self._kf_sent:
            self._kf_update[kf_id] = KfUpdateRecord(
                kf_id, pose, np.asarray(velocity, dtype=float),
                np.asarray(bias_gyro, dtype=float), np.asarray(bias_acc, dtype=float),
            )
        else:
            raise KeyError(f"update for unknown keyframe {kf_id}")

    def add_landmark(self, record: LmFullRecord):
        if record.lm_id in self._lm_sent or record.lm_id in self._lm_full:
            raise ValueError(f"landmark {record.lm_id} already journaled")
        self._lm_full[record.lm_id] = record

    def update_landmark(self, lm_id, position):
        if lm_id in self._lm_full:
            self._lm_full[lm_id].position = np.asarray(position, dtype=float)
        elif lm_id in self._lm_sent:
            self._lm_update[lm_id] = LmUpdateRecord(lm_id, np.asarray(position, dtype=float))
        else:
            raise KeyError(f"update for unknown landmark {lm_id}")

    def flush(self) -> Batch | None:
        if not (self._kf_full or self._kf_update or self._lm_full or self._lm_update):
            return None
        batch = Batch(
            self.agent_id,
            kf_full=list(self._kf_full.values()),
            kf_update=list(self._kf_update.values()),
            lm_full=list(self._lm_full.values()),
            lm_update=list(self._lm_update.values()),
        )
        self._kf_sent.update(self._kf_full)
        self._lm_sent.update(self._lm_full)
        self._kf_full, self._kf_update = {}, {}
        self._lm_full, self._lm_update = {}, {}
        return batch
