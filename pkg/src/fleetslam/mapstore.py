"""Server maps and the multi-map manager.

A ServerMap is a SLAM graph: keyframes (with observation lists and a
preintegrated-IMU link to the same-agent predecessor), landmarks, covisibility
edges, loop edges and AR anchors. The MapManager owns the map registry, the
keyframe descriptor database, and the access ledger serializing all map
mutation. Keys are composite (agent_id, entity_id) everywhere so merges never
collide.
"""
from __future__ import annotations

import binascii
import itertools
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .lie import Pose
from .preintegration import PreintegratedImu, chain_preintegrations
from .types import CameraIntrinsics, KeyframeState, Landmark, Observation
from . import wire

COVISIBILITY_THRESHOLD = 15
UPDATE_BUFFER_TIMEOUT = 10.0
CHECKPOINT_MAGIC = b"CVNM"
CHECKPOINT_VERSION = 1


def tau(obs_count: int) -> float:
    """Per-landmark redundancy of one observation, as a step in [0, 1]."""
    if obs_count <= 2:
        return 0.0
    if obs_count == 3:
        return 0.4
    if obs_count == 4:
        return 0.7
    if obs_count == 5:
        return 0.9
    return 1.0


@dataclass
class KeyframeRecord:
    state: KeyframeState
    observations: dict  # lm_key -> Observation
    intrinsics: CameraIntrinsics
    imu_link: tuple | None = None  # (prev_kf_key, PreintegratedImu)


@dataclass
class LoopEdge:
    key_query: tuple
    key_candidate: tuple
    T_cq: Pose
    inliers: int

    @property
    def pair(self):
        return tuple(sorted((self.key_query, self.key_candidate)))


@dataclass
class Anchor:
    pose: Pose
    payload: bytes


class ServerMap:
    """One SLAM graph; mutation assumed to be serialized by the caller."""

    def __init__(self, map_id: int, covis_threshold=COVISIBILITY_THRESHOLD):
        self.map_id = map_id
        self.covis_threshold = covis_threshold
        self.keyframes: dict[tuple, KeyframeRecord] = {}
        self.landmarks: dict[tuple, Landmark] = {}
        self.lm_observers: dict[tuple, set] = {}
        self.lm_ref: dict[tuple, tuple] = {}
        self._shared: dict[tuple, int] = {}  # unordered kf pair -> shared-obs count
        self.loop_edges: list[LoopEdge] = []
        self.anchors: list[Anchor] = []
        self.agent_ids: set[int] = set()
        self._pending_updates: dict = {}

    # ------------------------------------------------------------- graph ops
    @property
    def covisibility(self) -> dict:
        return {p: w for p, w in self._shared.items() if w >= self.covis_threshold}

    def ordered_keys(self) -> list:
        return sorted(self.keyframes, key=lambda k: (self.keyframes[k].state.timestamp, k))

    def agent_keys(self, agent_id) -> list:
        return [k for k in self.ordered_keys() if k[0] == agent_id]

    def integrate_landmark(self, lm: Landmark) -> bool:
        key = lm.key
        if key in self.landmarks:
            return False
        self.landmarks[key] = lm
        self.lm_observers[key] = set()
        return True

    def integrate_keyframe(self, state: KeyframeState, observations, intrinsics,
                           imu_link=None, now=None) -> bool:
        """Add a keyframe with its observations; False when the id already exists."""
        key = state.key
        if key in self.keyframes:
            return False
        rec = KeyframeRecord(state=state, observations={}, intrinsics=intrinsics,
                             imu_link=imu_link)
        self.keyframes[key] = rec
        self.agent_ids.add(state.agent_id)
        for obs in observations:
            lm_key = (state.agent_id, obs.lm_id)
            self.add_observation(key, lm_key, obs)
        self._apply_pending(key, now)
        return True

    def add_observation(self, kf_key, lm_key, obs: Observation) -> bool:
        if lm_key not in self.landmarks:
            return False
        rec = self.keyframes[kf_key]
        if lm_key in rec.observations:
            return False
        rec.observations[lm_key] = obs
        for other in self.lm_observers[lm_key]:
            pair = tuple(sorted((kf_key, other)))
            self._shared[pair] = self._shared.get(pair, 0) + 1
        self.lm_observers[lm_key].add(kf_key)
        if lm_key not in self.lm_ref:
            self.lm_ref[lm_key] = kf_key
        return True

    def remove_observation(self, kf_key, lm_key):
        rec = self.keyframes.get(kf_key)
        if rec is None or lm_key not in rec.observations:
            return
        del rec.observations[lm_key]
        observers = self.lm_observers.get(lm_key)
        if observers is None:
            return
        observers.discard(kf_key)
        for other in observers:
            pair = tuple(sorted((kf_key, other)))
            w = self._shared.get(pair, 0) - 1
            if w <= 0:
                self._shared.pop(pair, None)
            else:
                self._shared[pair] = w
        if self.lm_ref.get(lm_key) == kf_key:
            self.lm_ref[lm_key] = self._earliest_observer(lm_key)

    def _earliest_observer(self, lm_key):
        observers = self.lm_observers.get(lm_key) or ()
        if not observers:
            return None
        return min(observers, key=lambda k: (self.keyframes[k].state.timestamp, k))

    def landmark_reference_kf(self, lm_key):
        return self.lm_ref.get(lm_key)

    def remove_landmark(self, lm_key):
        for kf_key in list(self.lm_observers.get(lm_key, ())):
            self.remove_observation(kf_key, lm_key)
        self.landmarks.pop(lm_key, None)
        self.lm_observers.pop(lm_key, None)
        self.lm_ref.pop(lm_key, None)

    def prune_underobserved_landmarks(self) -> int:
        doomed = [k for k, obs in self.lm_observers.items() if len(obs) < 2]
        for k in doomed:
            self.remove_landmark(k)
        return len(doomed)

    def apply_update(self, update, agent_id, now=None) -> bool:
        """Apply a state update; unknown targets are buffered for a while."""
        now = time.monotonic() if now is None else now
        self._purge_pending(now)
        if isinstance(update, wire.KfUpdateRecord):
            key = (agent_id, update.kf_id)
            rec = self.keyframes.get(key)
            if rec is None:
                self._pending_updates[("kf", key)] = (update, now)
                return False
            rec.state.pose = update.pose
            rec.state.velocity = np.array(update.velocity, dtype=float)
            rec.state.bias_gyro = np.array(update.bias_gyro, dtype=float)
            rec.state.bias_acc = np.array(update.bias_acc, dtype=float)
            return True
        if isinstance(update, wire.LmUpdateRecord):
            key = (agent_id, update.lm_id)
            lm = self.landmarks.get(key)
            if lm is None:
                self._pending_updates[("lm", key)] = (update, now)
                return False
            lm.position = np.array(update.position, dtype=float)
            return True
        raise TypeError(f"unsupported update {type(update).__name__}")

    def _apply_pending(self, key, now):
        pend = self._pending_updates.pop(("kf", key), None)
        if pend is not None:
            update, arrived = pend
            now = time.monotonic() if now is None else now
            if now - arrived <= UPDATE_BUFFER_TIMEOUT:
                self.apply_update(update, key[0], now)

    def _purge_pending(self, now):
        stale = [k for k, (_, t) in self._pending_updates.items()
                 if now - t > UPDATE_BUFFER_TIMEOUT]
        for k in stale:
            del self._pending_updates[k]

    # ------------------------------------------------------------ redundancy
    def redundancy_value(self, kf_key) -> float:
        """Mean observation redundancy of the keyframe's landmarks (1 = disposable)."""
        rec = self.keyframes[kf_key]
        if not rec.observations:
            return 1.0
        total = 0.0
        for lm_key in rec.observations:
            total += tau(len(self.lm_observers.get(lm_key, ())))
        return total / len(rec.observations)

    def _protected_keys(self, protect_recent=10) -> set:
        protected = set()
        for agent in self.agent_ids:
            chain = self.agent_keys(agent)
            if not chain:
                continue
            protected.add(chain[0])  # per-agent gauge keyframe
            protected.update(chain[-protect_recent:])
        for edge in self.loop_edges:
            protected.add(edge.key_query)
            protected.add(edge.key_candidate)
        return protected

    def remove_keyframe(self, kf_key):
        """Delete a keyframe, rewiring the agent's IMU chain across the gap."""
        rec = self.keyframes[kf_key]
        successor = None
        for k2, rec2 in self.keyframes.items():
            if rec2.imu_link is not None and rec2.imu_link[0] == kf_key:
                successor = k2
                break
        if successor is not None:
            succ_rec = self.keyframes[successor]
            if rec.imu_link is not None:
                prev_key, first = rec.imu_link
                chained = chain_preintegrations(first, succ_rec.imu_link[1])
                succ_rec.imu_link = (prev_key, chained)
            else:
                succ_rec.imu_link = None
        for lm_key in list(rec.observations):
            self.remove_observation(kf_key, lm_key)
        del self.keyframes[kf_key]
        self.prune_underobserved_landmarks()

    def _neighbor_gap(self, kf_key) -> float:
        """Time span bridged if this keyframe were removed from its chain."""
        chain = self.agent_keys(kf_key[0])
        i = chain.index(kf_key)
        t = self.keyframes[kf_key].state.timestamp
        prev_t = self.keyframes[chain[i - 1]].state.timestamp if i > 0 else t
        next_t = self.keyframes[chain[i + 1]].state.timestamp if i + 1 < len(chain) else t
        return next_t - prev_t

    def prune_keyframes(self, target_kf_count: int, protect_recent=10) -> list:
        """Greedily remove the most redundant eligible keyframes until the
        target count is reached (or no candidate remains).

        Ties on the redundancy value are broken toward the keyframe that is
        temporally most crowded, keeping the surviving chains uniform."""
        removed = []
        while len(self.keyframes) > target_kf_count:
            protected = self._protected_keys(protect_recent)
            candidates = [k for k in self.keyframes if k not in protected]
            if not candidates:
                break
            best = max(candidates,
                       key=lambda k: (self.redundancy_value(k), -self._neighbor_gap(k), k))
            self.remove_keyframe(best)
            removed.append(best)
        return removed

    # ----------------------------------------------------------------- audit
    def audit(self) -> list[str]:
        """Full referential-integrity check; returns a list of problems."""
        problems = []
        for kf_key, rec in self.keyframes.items():
            for lm_key in rec.observations:
                if lm_key not in self.landmarks:
                    problems.append(f"KF {kf_key} observes missing LM {lm_key}")
                elif kf_key not in self.lm_observers.get(lm_key, ()):
                    problems.append(f"observer index misses ({kf_key}, {lm_key})")
            if rec.imu_link is not None:
                prev_key = rec.imu_link[0]
                if prev_key not in self.keyframes:
                    problems.append(f"KF {kf_key} imu link to missing {prev_key}")
                elif prev_key[0] != kf_key[0]:
                    problems.append(f"KF {kf_key} imu link crosses agents")
        for lm_key, observers in self.lm_observers.items():
            if lm_key not in self.landmarks:
                problems.append(f"observer index for missing LM {lm_key}")
            for kf_key in observers:
                if kf_key not in self.keyframes:
                    problems.append(f"LM {lm_key} observed by missing KF {kf_key}")
                elif lm_key not in self.keyframes[kf_key].observations:
                    problems.append(f"LM {lm_key} observer {kf_key} lacks the observation")
            ref = self.lm_ref.get(lm_key)
            if observers and (ref is None or ref not in observers):
                problems.append(f"LM {lm_key} reference KF {ref} is not an observer")
        recount: dict[tuple, int] = {}
        for lm_key, observers in self.lm_observers.items():
            obs_sorted = sorted(observers)
            for i, a in enumerate(obs_sorted):
                for b in obs_sorted[i + 1:]:
                    pair = (a, b)
                    recount[pair] = recount.get(pair, 0) + 1
        if recount != self._shared:
            problems.append("covisibility weights disagree with recount")
        for edge in self.loop_edges:
            for k in (edge.key_query, edge.key_candidate):
                if k not in self.keyframes:
                    problems.append(f"loop edge references missing KF {k}")
        return problems

    def counts(self):
        return {
            "keyframes": len(self.keyframes),
            "landmarks": len(self.landmarks),
            "covis_edges": len(self.covisibility),
            "loop_edges": len(self.loop_edges),
            "anchors": len(self.anchors),
            "agents": sorted(self.agent_ids),
        }


class MapRetiredError(Exception):
    """The map was merged away; retry against the successor id."""

    def __init__(self, map_id, successor):
        super().__init__(f"map {map_id} retired; successor is {successor}")
        self.successor = successor


@dataclass
class Token:
    map_id: int
    mode: str
    token_id: int
    thread_id: int


class _LockState:
    __slots__ = ("shared", "exclusive", "queue", "retired_to")

    def __init__(self):
        self.shared: set[int] = set()
        self.exclusive: int | None = None
        self.queue: deque = deque()
        self.retired_to: int | None = None


class KfDatabase:
    """Descriptor index over all keyframes for place-recognition voting."""

    _POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)

    def __init__(self):
        self._entries: dict[tuple, dict] = {}
        self._stack = None  # (descriptor matrix, owner index) cache
        self._lock = threading.Lock()

    def add_keyframe(self, kf_key, map_id, descriptors: np.ndarray):
        with self._lock:
            self._entries[kf_key] = {
                "map_id": map_id,
                "descriptors": np.asarray(descriptors, dtype=np.uint8).reshape(-1, 32),
            }
            self._stack = None

    def remove_keyframe(self, kf_key):
        with self._lock:
            if self._entries.pop(kf_key, None) is not None:
                self._stack = None

    def remap(self, kf_keys, new_map_id):
        with self._lock:
            for k in kf_keys:
                if k in self._entries:
                    self._entries[k]["map_id"] = new_map_id

    def map_of(self, kf_key):
        with self._lock:
            e = self._entries.get(kf_key)
            return None if e is None else e["map_id"]

    def __contains__(self, kf_key):
        with self._lock:
            return kf_key in self._entries

    def __len__(self):
        with self._lock:
            return len(self._entries)

    def _stacked(self):
        if self._stack is None:
            mats, owners = [], []
            for i, (key, e) in enumerate(self._entries.items()):
                d = e["descriptors"]
                if len(d):
                    mats.append(d)
                    owners.append(np.full(len(d), i))
            keys = list(self._entries.keys())
            if mats:
                self._stack = (np.vstack(mats), np.concatenate(owners), keys)
            else:
                self._stack = (np.zeros((0, 32), np.uint8), np.zeros(0, int), keys)
        return self._stack

    def vote(self, query_descriptors: np.ndarray, hamming_radius: int,
             exclude_keys=()) -> dict:
        """Each query descriptor votes for the keyframe owning its nearest
        database descriptor within the Hamming radius."""
        with self._lock:
            desc, owners, keys = self._stacked()
            if len(desc) == 0:
                return {}
            excluded = {k for k in exclude_keys}
            ex_rows = np.array([keys[o] in excluded for o in owners]) if excluded else None
            q = np.asarray(query_descriptors, dtype=np.uint8).reshape(-1, 32)
            votes: dict[tuple, int] = {}
            for row in q:
                dist = self._POPCOUNT[desc ^ row].sum(axis=1)
                if ex_rows is not None:
                    dist = np.where(ex_rows, 10_000, dist)
                j = int(np.argmin(dist))
                if dist[j] <= hamming_radius:
                    key = keys[owners[j]]
                    votes[key] = votes.get(key, 0) + 1
            return votes


class MapManager:
    """Registry of server maps plus the access ledger and KF database."""

    def __init__(self, covis_threshold=COVISIBILITY_THRESHOLD):
        self.covis_threshold = covis_threshold
        self.maps: dict[int, ServerMap] = {}
        self.kf_database = KfDatabase()
        self._next_map_id = itertools.count(1)
        self._next_token_id = itertools.count(1)
        self._cond = threading.Condition()
        self._locks: dict[int, _LockState] = {}
        self._successors: dict[int, int] = {}
        self.agent_map: dict[int, int] = {}

    # -------------------------------------------------------------- registry
    def create_map(self, agent_id: int) -> int:
        with self._cond:
            map_id = next(self._next_map_id)
            self.maps[map_id] = ServerMap(map_id, self.covis_threshold)
            self._locks[map_id] = _LockState()
            self.agent_map[agent_id] = map_id
        return map_id

    def register_map(self, smap: ServerMap) -> int:
        with self._cond:
            map_id = next(self._next_map_id)
            smap.map_id = map_id
            self.maps[map_id] = smap
            self._locks[map_id] = _LockState()
            for agent in smap.agent_ids:
                self.agent_map[agent] = map_id
        return map_id

    def get_map(self, map_id) -> ServerMap:
        return self.maps[map_id]

    def resolve(self, map_id) -> int:
        """Follow retirement pointers to the live successor id."""
        with self._cond:
            seen = set()
            while map_id in self._successors:
                if map_id in seen:
                    raise RuntimeError("successor cycle")
                seen.add(map_id)
                map_id = self._successors[map_id]
            return map_id

    def map_of_agent(self, agent_id):
        mid = self.agent_map.get(agent_id)
        return None if mid is None else self.resolve(mid)

    def live_map_ids(self) -> list[int]:
        with self._cond:
            return [m for m in self.maps if m not in self._successors]

    # ---------------------------------------------------------- access ledger
    def acquire(self, map_id, mode: str, timeout=None) -> Token:
        """Readers-writer token; FIFO queue so writers are never starved."""
        if mode not in ("shared", "exclusive"):
            raise ValueError(f"bad mode {mode}")
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            state = self._lock_state_checked(map_id)
            token = Token(map_id, mode, next(self._next_token_id), threading.get_ident())
            waiter = {"token": token, "granted": False}
            state.queue.append(waiter)
            self._pump(state)
            while not waiter["granted"]:
                if state.retired_to is not None:
                    state.queue.remove(waiter)
                    raise MapRetiredError(map_id, self.resolve(map_id))
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    state.queue.remove(waiter)
                    self._pump(state)
                    raise TimeoutError(f"acquire({map_id}, {mode}) timed out")
                self._cond.wait(remaining)
            if state.retired_to is not None:
                # granted in a race with retirement: hand back the grant
                if mode == "shared":
                    state.shared.discard(token.token_id)
                elif state.exclusive == token.token_id:
                    state.exclusive = None
                raise MapRetiredError(map_id, self.resolve(map_id))
            return token

    def release(self, token: Token):
        with self._cond:
            state = self._locks.get(token.map_id)
            if state is None:
                return
            if token.mode == "shared":
                state.shared.discard(token.token_id)
            elif state.exclusive == token.token_id:
                state.exclusive = None
            self._pump(state)
            self._cond.notify_all()

    def _lock_state_checked(self, map_id) -> _LockState:
        if map_id in self._successors:
            raise MapRetiredError(map_id, self.resolve(map_id))
        state = self._locks.get(map_id)
        if state is None:
            raise KeyError(f"unknown map {map_id}")
        return state

    def _pump(self, state: _LockState):
        if state.retired_to is not None:
            self._cond.notify_all()
            return
        granted = False
        while state.queue:
            head = state.queue[0]
            mode = head["token"].mode
            if mode == "exclusive":
                if state.exclusive is None and not state.shared:
                    state.exclusive = head["token"].token_id
                    head["granted"] = True
                    state.queue.popleft()
                    granted = True
                break
            if state.exclusive is not None:
                break
            state.shared.add(head["token"].token_id)
            head["granted"] = True
            state.queue.popleft()
            granted = True
        if granted:
            self._cond.notify_all()

    def assert_exclusive(self, map_id):
        state = self._locks.get(map_id)
        if state is None or state.exclusive is None:
            raise PermissionError(f"map {map_id} is not exclusively locked")

    def _retire(self, map_id, successor):
        # caller holds self._cond
        self._successors[map_id] = successor
        state = self._locks.get(map_id)
        if state is not None:
            state.retired_to = successor
        self._cond.notify_all()

    # -------------------------------------------------------------- ingestion
    def integrate_keyframe(self, map_id, state: KeyframeState, observations,
                           intrinsics, preint=None, now=None) -> bool:
        """Integrate a keyframe; the IMU link attaches to the agent's most
        recent keyframe already in the map. Caller holds the exclusive token."""
        self.assert_exclusive(map_id)
        smap = self.maps[map_id]
        imu_link = None
        if preint is not None:
            chain = smap.agent_keys(state.agent_id)
            if chain:
                imu_link = (chain[-1], preint)
        ok = smap.integrate_keyframe(state, observations, intrinsics, imu_link, now=now)
        if ok:
            desc = np.array(
                [np.frombuffer(o.descriptor, dtype=np.uint8) for o in observations]
            ).reshape(-1, 32) if observations else np.zeros((0, 32), np.uint8)
            self.kf_database.add_keyframe(state.key, map_id, desc)
        return ok

    # ----------------------------------------------------------------- fusion
    def merge_maps(self, map_id_q, map_id_c, key_q, key_c, T_cq: Pose,
                   lm_matches=()) -> int:
        """Merge the query map into the candidate map's frame; returns the new
        map id. Caller holds exclusive tokens on both maps."""
        self.assert_exclusive(map_id_q)
        self.assert_exclusive(map_id_c)
        map_q = self.maps[map_id_q]
        map_c = self.maps[map_id_c]
        T_wq_s = map_q.keyframes[key_q].state.pose
        T_wc_s = map_c.keyframes[key_c].state.pose
        # alignment mapping query-map world into candidate-map world
        T_align = T_wc_s.compose(T_cq).compose(T_wq_s.inverse())

        merged = ServerMap(0, self.covis_threshold)
        overlap = set(map_q.keyframes) & set(map_c.keyframes)
        if overlap:
            raise ValueError(f"composite keyframe keys collide across maps: {overlap}")

        for src, transform in ((map_c, None), (map_q, T_align)):
            for lm_key, lm in src.landmarks.items():
                moved = lm.copy()
                if transform is not None:
                    moved.position = transform.apply(moved.position)
                merged.integrate_landmark(moved)
            for kf_key in src.ordered_keys():
                rec = src.keyframes[kf_key]
                state = rec.state.copy()
                if transform is not None:
                    state.pose = transform.compose(state.pose)
                    state.velocity = transform.R @ state.velocity
                new_rec = KeyframeRecord(
                    state=state,
                    observations={},
                    intrinsics=rec.intrinsics,
                    imu_link=None if rec.imu_link is None
                    else (rec.imu_link[0], rec.imu_link[1].copy()),
                )
                merged.keyframes[kf_key] = new_rec
                merged.agent_ids.add(kf_key[0])
                for lm_key, obs in rec.observations.items():
                    merged.add_observation(kf_key, lm_key, obs.copy())
            for anchor in src.anchors:
                pose = anchor.pose.copy()
                if transform is not None:
                    pose = transform.compose(pose)
                merged.anchors.append(Anchor(pose, anchor.payload))
            merged.loop_edges.extend(
                LoopEdge(e.key_query, e.key_candidate, e.T_cq.copy(), e.inliers)
                for e in src.loop_edges
            )

        for q_key, c_key in lm_matches:
            if q_key not in merged.landmarks or c_key not in merged.landmarks:
                continue
            winner, loser = c_key, q_key
            if len(merged.lm_observers[q_key]) > len(merged.lm_observers[c_key]):
                winner, loser = q_key, c_key
            self._fuse_landmarks(merged, winner, loser)
        merged.prune_underobserved_landmarks()
        # seam constraint so the merged map always carries its fusion evidence
        merged.loop_edges.append(LoopEdge(key_q, key_c, T_cq.copy(), 0))

        with self._cond:
            new_id = next(self._next_map_id)
            merged.map_id = new_id
            self.maps[new_id] = merged
            self._locks[new_id] = _LockState()
            self._retire(map_id_q, new_id)
            self._retire(map_id_c, new_id)
            for agent, mid in list(self.agent_map.items()):
                if mid in (map_id_q, map_id_c):
                    self.agent_map[agent] = new_id
        self.kf_database.remap(list(merged.keyframes), new_id)
        return new_id

    @staticmethod
    def _fuse_landmarks(smap: ServerMap, winner, loser):
        for kf_key in list(smap.lm_observers.get(loser, ())):
            obs = smap.keyframes[kf_key].observations.get(loser)
            smap.remove_observation(kf_key, loser)
            if obs is not None and winner not in smap.keyframes[kf_key].observations:
                smap.add_observation(kf_key, winner, obs)
        smap.remove_landmark(loser)

    # ---------------------------------------------------------------- pruning
    def prune_keyframes(self, map_id, target_kf_count, protect_recent=10) -> list:
        self.assert_exclusive(map_id)
        removed = self.maps[map_id].prune_keyframes(target_kf_count, protect_recent)
        for k in removed:
            self.kf_database.remove_keyframe(k)
        return removed


# ------------------------------------------------------------------ checkpoint
def _kf_full_record(rec: KeyframeRecord):
    state = rec.state
    obs_records = []
    owners = []
    for lm_key in sorted(rec.observations):
        o = rec.observations[lm_key]
        obs_records.append(wire.ObsRecord(lm_key[1], np.asarray(o.pixel, float), o.descriptor))
        owners.append(lm_key[0])
    preint = rec.imu_link[1] if rec.imu_link is not None else None
    return wire.KfFullRecord(
        kf_id=state.kf_id,
        timestamp=state.timestamp,
        pose=state.pose,
        velocity=np.asarray(state.velocity, float),
        bias_gyro=np.asarray(state.bias_gyro, float),
        bias_acc=np.asarray(state.bias_acc, float),
        intrinsics=rec.intrinsics.as_vector(),
        observations=obs_records,
        preint=preint,
    ), owners


def checkpoint_bytes(smap: ServerMap) -> bytes:
    """Serialize the map: header, wire-format LM/KF records, edge and anchor
    sections, CRC32 trailer. Little-endian and bit-exact."""
    w = wire._Writer()
    w.raw(CHECKPOINT_MAGIC)
    w.u16(CHECKPOINT_VERSION)
    w.u32(smap.map_id)
    agents = sorted(smap.agent_ids)
    w.u32(len(agents))
    for a in agents:
        w.u32(a)

    lm_keys = sorted(smap.landmarks)
    w.u32(len(lm_keys))
    for key in lm_keys:
        lm = smap.landmarks[key]
        w.u32(key[0])
        wire._write_lm_full(w, wire.LmFullRecord(key[1], np.asarray(lm.position, float),
                                                 lm.descriptor))

    kf_keys = smap.ordered_keys()
    w.u32(len(kf_keys))
    owner_sections = []
    for key in kf_keys:
        rec, owners = _kf_full_record(smap.keyframes[key])
        w.u32(key[0])
        wire._write_kf_full(w, rec)
        owner_sections.append(owners)
    # observation owners (cross-agent observations appear after fusion)
    for owners in owner_sections:
        for a in owners:
            w.u32(a)

    covis = smap.covisibility
    w.u32(len(covis))
    for (ka, kb), weight in sorted(covis.items()):
        w.u32(ka[0]); w.u32(ka[1]); w.u32(kb[0]); w.u32(kb[1]); w.u32(weight)

    w.u32(len(smap.loop_edges))
    for e in smap.loop_edges:
        w.u32(e.key_query[0]); w.u32(e.key_query[1])
        w.u32(e.key_candidate[0]); w.u32(e.key_candidate[1])
        w.pose(e.T_cq)
        w.u32(e.inliers)

    w.u32(len(smap.anchors))
    for a in smap.anchors:
        w.pose(a.pose)
        w.u32(len(a.payload))
        w.raw(a.payload)

    body = w.getvalue()
    crc = binascii.crc32(body) & 0xFFFFFFFF
    return body + struct.pack("<I", crc)


def save_checkpoint(smap: ServerMap, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(smap))


class CheckpointError(Exception):
    pass


def map_from_checkpoint_bytes(blob: bytes,
                              default_intrinsics: CameraIntrinsics | None = None) -> ServerMap:
    """Reconstruct a map from checkpoint bytes; raises CheckpointError on a
    bad magic/version, truncation or checksum mismatch."""
    if len(blob) < 10:
        raise CheckpointError("file too short")
    body, trailer = blob[:-4], blob[-4:]
    if binascii.crc32(body) & 0xFFFFFFFF != struct.unpack("<I", trailer)[0]:
        raise CheckpointError("checksum mismatch")
    r = wire._Reader(body)
    try:
        if r.raw(4) != CHECKPOINT_MAGIC:
            raise CheckpointError("bad magic")
        version = r.u16()
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported version {version}")
        smap = ServerMap(r.u32())
        n_agents = r.u32()
        smap.agent_ids = {r.u32() for _ in range(n_agents)}

        n_lm = r.u32()
        for _ in range(n_lm):
            owner = r.u32()
            rec = wire._read_lm_full(r)
            smap.integrate_landmark(Landmark(rec.lm_id, rec.position, rec.descriptor, owner))

        n_kf = r.u32()
        kf_entries = []
        for _ in range(n_kf):
            owner = r.u32()
            kf_entries.append((owner, wire._read_kf_full(r)))

        last_of_agent: dict[int, tuple] = {}
        for owner, rec in kf_entries:
            state = KeyframeState(
                pose=rec.pose,
                velocity=rec.velocity,
                bias_gyro=rec.bias_gyro,
                bias_acc=rec.bias_acc,
                timestamp=rec.timestamp,
                agent_id=owner,
                kf_id=rec.kf_id,
            )
            base = default_intrinsics or CameraIntrinsics(0, 0, 0, 0)
            intr = CameraIntrinsics(
                fx=rec.intrinsics[0], fy=rec.intrinsics[1],
                cx=rec.intrinsics[2], cy=rec.intrinsics[3],
                width=base.width, height=base.height, T_CS=base.T_CS,
            )
            imu_link = None
            if rec.preint is not None and owner in last_of_agent:
                imu_link = (last_of_agent[owner], rec.preint)
            key = (owner, rec.kf_id)
            record = KeyframeRecord(state=state, observations={}, intrinsics=intr,
                                    imu_link=imu_link)
            smap.keyframes[key] = record
            last_of_agent[owner] = key

        for owner, rec in kf_entries:
            key = (owner, rec.kf_id)
            for o in rec.observations:
                lm_owner = r.u32()
                obs = Observation(rec.kf_id, o.lm_id, o.pixel, o.descriptor)
                smap.add_observation(key, (lm_owner, o.lm_id), obs)

        n_covis = r.u32()
        for _ in range(n_covis):
            r.u32(); r.u32(); r.u32(); r.u32(); r.u32()  # recomputed from observations

        n_loops = r.u32()
        for _ in range(n_loops):
            kq = (r.u32(), r.u32())
            kc = (r.u32(), r.u32())
            pose = r.pose()
            inliers = r.u32()
            smap.loop_edges.append(LoopEdge(kq, kc, pose, inliers))

        n_anchors = r.u32()
        for _ in range(n_anchors):
            pose = r.pose()
            payload = r.raw(r.u32())
            smap.anchors.append(Anchor(pose, payload))
        if not r.done():
            raise CheckpointError("trailing bytes")
    except wire.DecodeError as exc:
        raise CheckpointError(str(exc)) from exc
    return smap


def load_checkpoint(path, default_intrinsics: CameraIntrinsics | None = None) -> ServerMap:
    with open(path, "rb") as f:
        blob = f.read()
    return map_from_checkpoint_bytes(blob, default_intrinsics)
