"""TCP server orchestrating ingestion, place recognition, optimization,
pruning, drift-pose emission and the text command interface.

Threads: one handler per agent connection, one place-recognition worker, one
drift emitter, one command listener, one event-log writer. All map mutation
goes through the map manager's exclusive tokens; multi-map acquisitions are
ordered by map id so fusion and ingestion cannot deadlock.
"""
from __future__ import annotations

import json
import queue
import socket
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mapstore import (MapManager, MapRetiredError, ServerMap, checkpoint_bytes,
                       load_checkpoint, map_from_checkpoint_bytes, save_checkpoint)
from .optimizer import SolverConfig
from .placerec import (MATCH_HAMMING_RADIUS, MIN_ACCEPT_INLIERS, dispatch,
                       query_candidates, verify_ransac)
from .problems import run_gba, run_pgo
from .types import CameraIntrinsics, KeyframeState, Landmark, Observation
from . import wire


@dataclass
class ServerConfig:
    port: int = 0  # 0 binds an ephemeral port
    command_port: int = 0
    host: str = "127.0.0.1"
    covisibility_threshold: int = 15
    drift_rate_hz: float = 2.0
    sigma_px: float = 1.0
    outlier_threshold_px: float = 3.0
    gba_max_iters: int = 50
    pgo_max_iters: int = 20
    gradient_tol: float = 1e-8
    rel_cost_tol: float = 1e-8
    prune_protect_recent: int = 10
    prune_target: int = 0  # 0 disables pruning before on-demand GBA
    ransac_seed: int = 0
    min_accept_inliers: int = MIN_ACCEPT_INLIERS
    loop_cooldown_kfs: int = 5  # skip queries this soon after a closure
    gba_on_shutdown: bool = False
    checkpoint_dir: str = ""
    event_log: str = ""
    image_width: int = 640
    image_height: int = 480

    def gba_config(self) -> SolverConfig:
        return SolverConfig(max_iters=self.gba_max_iters,
                            gradient_tol=self.gradient_tol,
                            rel_cost_tol=self.rel_cost_tol)

    def pgo_config(self) -> SolverConfig:
        return SolverConfig(max_iters=self.pgo_max_iters,
                            gradient_tol=self.gradient_tol,
                            rel_cost_tol=self.rel_cost_tol)


def parse_config(path) -> ServerConfig:
    """key = value lines; '#' starts a comment; unknown keys rejected."""
    cfg = ServerConfig()
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (part.strip() for part in line.split("=", 1))
            if not hasattr(cfg, key):
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            current = getattr(cfg, key)
            if isinstance(current, bool):
                setattr(cfg, key, value.lower() in ("1", "true", "yes", "on"))
            elif isinstance(current, int):
                setattr(cfg, key, int(value))
            elif isinstance(current, float):
                setattr(cfg, key, float(value))
            else:
                setattr(cfg, key, value)
    return cfg


class EventLog:
    """Append-only event list plus an optional JSON-lines file, written by a
    single consumer thread fed from a multi-producer queue."""

    def __init__(self, path=None):
        self.events: list[dict] = []
        self._queue: queue.Queue = queue.Queue()
        self._path = Path(path) if path else None
        self._lock = threading.Lock()
        self._thread = threading.Thread(target=self._writer, daemon=True)
        self._thread.start()

    def emit(self, etype: str, **payload):
        event = {"ts": time.time(), "type": etype, **payload}
        with self._lock:
            self.events.append(event)
        self._queue.put(event)

    def _writer(self):
        f = open(self._path, "a") if self._path else None
        while True:
            event = self._queue.get()
            if event is None:
                break
            if f is not None:
                f.write(json.dumps(event) + "\n")
                f.flush()
        if f is not None:
            f.close()

    def close(self):
        self._queue.put(None)
        self._thread.join(timeout=5.0)

    def tail(self, n=10):
        with self._lock:
            return list(self.events[-n:])

    def of_type(self, etype):
        with self._lock:
            return [e for e in self.events if e["type"] == etype]


class Server:
    """The collaborative back-end; start() returns once both ports listen."""

    def __init__(self, config: ServerConfig | None = None):
        self.config = config or ServerConfig()
        self.manager = MapManager(self.config.covisibility_threshold)
        self.events = EventLog(self.config.event_log or None)
        self._pr_queue: queue.Queue = queue.Queue()
        self._pr_pending = 0
        self._pr_lock = threading.Lock()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._conn_lock = threading.Lock()
        self._connections: dict[int, socket.socket] = {}
        self._conn_send_locks: dict[int, threading.Lock] = {}
        self._applied_batches: dict[int, int] = {}
        self._bytes_in: dict[int, int] = {}
        self._bytes_out: dict[int, int] = {}
        # most recent raw local pose per agent, for relative KF placement
        self._last_local: dict[int, tuple] = {}
        self._last_loop_kf: dict[int, int] = {}
        # last released per-agent estimate (kf_id, pose), safe to read lock-free
        self._latest_kf: dict[int, tuple] = {}
        self._listener = None
        self._cmd_listener = None

    # ------------------------------------------------------------- lifecycle
    def start(self):
        self.events.emit("ServerStarted")
        self._listener = socket.create_server((self.config.host, self.config.port))
        self.config.port = self._listener.getsockname()[1]
        self._cmd_listener = socket.create_server(
            (self.config.host, self.config.command_port))
        self.config.command_port = self._cmd_listener.getsockname()[1]
        for target in (self._accept_loop, self._command_loop,
                       self._pr_worker, self._drift_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self):
        if self._stop.is_set():
            return
        self._stop.set()
        if self.config.gba_on_shutdown:
            for mid in self.manager.live_map_ids():
                try:
                    self.run_gba(mid)
                except Exception as exc:  # pragma: no cover - defensive
                    self.events.emit("Error", where="shutdown_gba", error=str(exc))
        if self.config.checkpoint_dir:
            out = Path(self.config.checkpoint_dir)
            out.mkdir(parents=True, exist_ok=True)
            for mid in self.manager.live_map_ids():
                self.save_map(mid, out / f"map_{mid}.cvnm")
        for listener in (self._listener, self._cmd_listener):
            # shutdown wakes threads blocked in accept(); close alone does not
            try:
                listener.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                listener.close()
            except OSError:
                pass
        with self._conn_lock:
            conns = list(self._connections.values())
        for c in conns:
            try:
                c.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            try:
                c.close()
            except OSError:
                pass
        self._pr_queue.put(None)
        for t in self._threads:
            t.join(timeout=10.0)
        self.events.emit("ServerStopped")
        self.events.close()

    def wait(self):
        while not self._stop.is_set():
            time.sleep(0.1)

    # ------------------------------------------------------------ connection
    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._handle_connection, args=(conn,), daemon=True)
            t.start()

    def _send_to_agent(self, agent_id, message) -> bool:
        with self._conn_lock:
            conn = self._connections.get(agent_id)
            lock = self._conn_send_locks.get(agent_id)
        if conn is None:
            return False
        blob = wire.encode_message(message)
        try:
            with lock:
                conn.sendall(blob)
            self._bytes_out[agent_id] = self._bytes_out.get(agent_id, 0) + len(blob)
            return True
        except OSError:
            return False

    def _handle_connection(self, conn: socket.socket):
        stream = conn.makefile("rb")
        agent_id = None
        try:
            while not self._stop.is_set():
                try:
                    msg = wire.read_message(stream)
                except wire.DecodeError as exc:
                    self.events.emit("Error", where="decode", error=str(exc))
                    break
                if msg is None:
                    break
                if agent_id is None and not isinstance(msg, wire.Hello):
                    self.events.emit("Error", where="protocol",
                                     error="first message must be HELLO")
                    break
                self._bytes_in[msg.agent_id] = (
                    self._bytes_in.get(msg.agent_id, 0) + len(wire.encode_message(msg))
                )
                if isinstance(msg, wire.Hello):
                    agent_id = msg.agent_id
                    with self._conn_lock:
                        self._connections[agent_id] = conn
                        self._conn_send_locks[agent_id] = threading.Lock()
                    if self.manager.map_of_agent(agent_id) is None:
                        mid = self.manager.create_map(agent_id)
                        self.events.emit("AgentJoined", agent=agent_id, map=mid)
                    else:
                        self.events.emit("AgentRejoined", agent=agent_id)
                    self._send_to_agent(agent_id, wire.Ack(
                        agent_id, self._applied_batches.get(agent_id, 0)))
                elif isinstance(msg, wire.Batch):
                    try:
                        new_keys = self._apply_batch(msg)
                    except Exception as exc:
                        self.events.emit("Error", where="ingest", error=str(exc))
                        new_keys = []
                    self._applied_batches[agent_id] = (
                        self._applied_batches.get(agent_id, 0) + 1)
                    self._send_to_agent(agent_id, wire.Ack(
                        agent_id, self._applied_batches[agent_id]))
                    for key in new_keys:
                        with self._pr_lock:
                            self._pr_pending += 1
                        self._pr_queue.put(key)
                elif isinstance(msg, wire.Bye):
                    self.events.emit("AgentLeft", agent=agent_id)
                    break
        finally:
            if agent_id is not None:
                with self._conn_lock:
                    if self._connections.get(agent_id) is conn:
                        del self._connections[agent_id]
                        del self._conn_send_locks[agent_id]
            try:
                conn.close()
            except OSError:
                pass

    # -------------------------------------------------------------- ingestion
    def _apply_batch(self, batch: wire.Batch) -> list:
        agent = batch.agent_id
        token = None
        for _ in range(8):  # the agent's map may be merged away while we wait
            map_id = self.manager.map_of_agent(agent)
            try:
                token = self.manager.acquire(map_id, "exclusive")
                break
            except MapRetiredError:
                continue
        if token is None:
            raise RuntimeError(f"could not lock a live map for agent {agent}")
        new_keys = []
        try:
            smap = self.manager.get_map(map_id)
            pending_lms = {rec.lm_id: rec for rec in batch.lm_full}
            for rec in batch.kf_full:
                # place the keyframe relative to the server's (possibly
                # optimized) estimate of its predecessor, composing the raw
                # local increment; landmarks created with it move along
                pose = rec.pose
                velocity = np.asarray(rec.velocity, dtype=float)
                frame_corr = None
                prev = self._last_local.get(agent)
                chain = smap.agent_keys(agent)
                if prev is not None and chain and prev[0] == chain[-1][1]:
                    prev_local = prev[1]
                    prev_server = smap.keyframes[chain[-1]].state.pose
                    frame_corr = prev_server.compose(prev_local.inverse())
                    pose = frame_corr.compose(rec.pose)
                    velocity = frame_corr.R @ velocity
                self._last_local[agent] = (rec.kf_id, rec.pose.copy())
                state = KeyframeState(
                    pose=pose, velocity=velocity,
                    bias_gyro=rec.bias_gyro, bias_acc=rec.bias_acc,
                    timestamp=rec.timestamp, agent_id=agent, kf_id=rec.kf_id,
                )
                intr = CameraIntrinsics(
                    fx=rec.intrinsics[0] or 400.0, fy=rec.intrinsics[1] or 400.0,
                    cx=rec.intrinsics[2] or self.config.image_width / 2,
                    cy=rec.intrinsics[3] or self.config.image_height / 2,
                    width=self.config.image_width, height=self.config.image_height,
                )
                # landmarks first observed by this keyframe share its frame
                for o in rec.observations:
                    lrec = pending_lms.pop(o.lm_id, None)
                    if lrec is None:
                        continue
                    lm_pos = (frame_corr.apply(lrec.position)
                              if frame_corr is not None else lrec.position)
                    if not smap.integrate_landmark(
                            Landmark(lrec.lm_id, lm_pos, lrec.descriptor, agent)):
                        self.events.emit("Rejected", kind="lm", agent=agent, id=lrec.lm_id)
                observations = [Observation(rec.kf_id, o.lm_id, o.pixel, o.descriptor)
                                for o in rec.observations]
                ok = self.manager.integrate_keyframe(
                    map_id, state, observations, intr, rec.preint)
                if ok:
                    new_keys.append(state.key)
                    self.events.emit("KfIntegrated", agent=agent, kf=rec.kf_id, map=map_id)
                else:
                    self.events.emit("Rejected", kind="kf", agent=agent, id=rec.kf_id)
            for lrec in pending_lms.values():
                if not smap.integrate_landmark(
                        Landmark(lrec.lm_id, lrec.position, lrec.descriptor, agent)):
                    self.events.emit("Rejected", kind="lm", agent=agent, id=lrec.lm_id)
            for rec in batch.kf_update:
                smap.apply_update(rec, agent)
            for rec in batch.lm_update:
                smap.apply_update(rec, agent)
            chain = smap.agent_keys(agent)
            if chain:
                newest = chain[-1]
                self._latest_kf[agent] = (newest[1], smap.keyframes[newest].state.pose.copy())
        finally:
            self.manager.release(token)
        return new_keys

    def _refresh_latest(self, smap: ServerMap):
        """Update the drift-pose snapshots after an optimization pass.

        Called while holding the map's exclusive token."""
        for agent in smap.agent_ids:
            chain = smap.agent_keys(agent)
            if chain:
                newest = chain[-1]
                self._latest_kf[agent] = (newest[1], smap.keyframes[newest].state.pose.copy())

    # ------------------------------------------------------------ drift poses
    def _drift_loop(self):
        period = 1.0 / self.config.drift_rate_hz
        while not self._stop.wait(period):
            with self._conn_lock:
                agents = list(self._connections.keys())
            for agent in agents:
                snap = self._latest_kf.get(agent)
                if snap is None:
                    continue
                kf_id, pose = snap
                self._send_to_agent(agent, wire.DriftPose(agent, kf_id, pose, time.time()))

    # ------------------------------------------------------- place recognition
    def _pr_worker(self):
        while True:
            item = self._pr_queue.get()
            if item is None or self._stop.is_set():
                return
            try:
                self._process_query(item)
            except MapRetiredError:
                pass
            except Exception as exc:  # pragma: no cover - defensive
                self.events.emit("Error", where="place_recognition", error=str(exc))
            finally:
                with self._pr_lock:
                    self._pr_pending -= 1

    def drain_place_recognition(self, timeout=60.0) -> bool:
        """Block until queued place-recognition work is finished."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._pr_lock:
                if self._pr_pending == 0:
                    return True
            time.sleep(0.02)
        return False

    def _process_query(self, query_key):
        agent, kf_id = query_key
        last = self._last_loop_kf.get(agent)
        if last is not None and kf_id - last < self.config.loop_cooldown_kfs:
            return
        db = self.manager.kf_database
        map_q = db.map_of(query_key)
        if map_q is None:
            return
        map_q = self.manager.resolve(map_q)
        tok_q = self.manager.acquire(map_q, "shared")
        try:
            smap_q = self.manager.get_map(map_q)
            rec_q = smap_q.keyframes.get(query_key)
            if rec_q is None or not rec_q.observations:
                return
            q_desc = np.stack([np.frombuffer(o.descriptor, dtype=np.uint8)
                               for o in rec_q.observations.values()])
        finally:
            self.manager.release(tok_q)

        candidates = query_candidates(query_key, q_desc, db)
        for cand_key in candidates:
            match = self._verify(query_key, cand_key)
            if match is None:
                continue
            outcome, map_id = dispatch(match, self.manager, pgo_runner=self._pgo_after)
            if outcome == "loop":
                self._last_loop_kf[query_key[0]] = query_key[1]
                self.events.emit("LoopClosed", map=map_id,
                                 query=list(match.key_query),
                                 candidate=list(match.key_candidate),
                                 inliers=match.inliers)
                break
            if outcome == "fusion":
                self._last_loop_kf[query_key[0]] = query_key[1]
                self.events.emit("MapsFused", merged=map_id,
                                 query=list(match.key_query),
                                 candidate=list(match.key_candidate),
                                 inliers=match.inliers)
                break

    def _verify(self, query_key, cand_key):
        db = self.manager.kf_database
        map_q = db.map_of(query_key)
        map_c = db.map_of(cand_key)
        if map_q is None or map_c is None:
            return None
        map_q = self.manager.resolve(map_q)
        map_c = self.manager.resolve(map_c)
        tokens = []
        try:
            for mid in sorted({map_q, map_c}):
                tokens.append(self.manager.acquire(mid, "shared"))
            smap_q = self.manager.get_map(map_q)
            smap_c = self.manager.get_map(map_c)
            rec_q = smap_q.keyframes.get(query_key)
            rec_c = smap_c.keyframes.get(cand_key)
            if rec_q is None or rec_c is None:
                return None
            correspondences = _putative_matches(smap_q, rec_q, smap_c, rec_c)
            if len(correspondences) < 4:
                return None
            return verify_ransac(
                smap_q, query_key, smap_c, cand_key, correspondences,
                seed=self.config.ransac_seed,
                accept_inliers=self.config.min_accept_inliers,
            )
        except MapRetiredError:
            return None
        finally:
            for t in reversed(tokens):
                self.manager.release(t)

    def _pgo_after(self, map_id):
        """Run PGO under the exclusive token, reverting on divergence."""
        token = self.manager.acquire(map_id, "exclusive")
        try:
            smap = self.manager.get_map(map_id)
            snapshot = checkpoint_bytes(smap)
            try:
                report = run_pgo(smap, self.config.pgo_config())
            except Exception as exc:
                _map_from_bytes(smap, snapshot)
                self.events.emit("Error", where="pgo", error=str(exc))
                return
            if report.final_cost > report.initial_cost:
                _map_from_bytes(smap, snapshot)
                if smap.loop_edges:
                    smap.loop_edges.pop()
                self.events.emit("PgoReverted", map=map_id)
                return
            self._refresh_latest(smap)
            self.events.emit("PgoDone", map=map_id, iters=report.iterations,
                             initial_cost=report.initial_cost,
                             final_cost=report.final_cost,
                             wall_time=report.wall_time)
        finally:
            self.manager.release(token)

    # ------------------------------------------------------------ operations
    def run_gba(self, map_id) -> dict:
        map_id = self.manager.resolve(map_id)
        token = self.manager.acquire(map_id, "exclusive")
        try:
            smap = self.manager.get_map(map_id)
            pruned = []
            if self.config.prune_target and len(smap.keyframes) > self.config.prune_target:
                pruned = smap.prune_keyframes(self.config.prune_target,
                                              self.config.prune_protect_recent)
                for k in pruned:
                    self.manager.kf_database.remove_keyframe(k)
                self.events.emit("Pruned", map=map_id, removed=len(pruned))
            report, outliers = run_gba(smap, self.config.gba_config(),
                                       self.config.outlier_threshold_px,
                                       self.config.sigma_px)
            self._refresh_latest(smap)
            self.events.emit("GbaDone", map=map_id, iters=report.iterations,
                             initial_cost=report.initial_cost,
                             final_cost=report.final_cost,
                             wall_time=report.wall_time, outliers_removed=outliers,
                             pruned=len(pruned))
            return {"final_cost": report.final_cost, "iterations": report.iterations,
                    "wall_time": report.wall_time, "outliers_removed": outliers,
                    "pruned": len(pruned), "map": map_id}
        finally:
            self.manager.release(token)

    def prune(self, map_id, target) -> int:
        map_id = self.manager.resolve(map_id)
        token = self.manager.acquire(map_id, "exclusive")
        try:
            removed = self.manager.prune_keyframes(
                map_id, target, self.config.prune_protect_recent)
            self.events.emit("Pruned", map=map_id, removed=len(removed))
            return len(self.manager.get_map(map_id).keyframes)
        finally:
            self.manager.release(token)

    def save_map(self, map_id, path) -> str:
        map_id = self.manager.resolve(map_id)
        token = self.manager.acquire(map_id, "shared")
        try:
            save_checkpoint(self.manager.get_map(map_id), path)
            return str(path)
        finally:
            self.manager.release(token)

    def load_map(self, path) -> int:
        smap = load_checkpoint(path)
        map_id = self.manager.register_map(smap)
        for key, rec in smap.keyframes.items():
            desc = (np.stack([np.frombuffer(o.descriptor, dtype=np.uint8)
                              for o in rec.observations.values()])
                    if rec.observations else np.zeros((0, 32), np.uint8))
            self.manager.kf_database.add_keyframe(key, map_id, desc)
        self._refresh_latest(smap)
        self.events.emit("MapLoaded", map=map_id, path=str(path))
        return map_id

    def stats(self) -> dict:
        maps = {}
        for mid in self.manager.live_map_ids():
            try:
                token = self.manager.acquire(mid, "shared", timeout=5.0)
            except (MapRetiredError, TimeoutError):
                continue
            try:
                maps[str(mid)] = self.manager.get_map(mid).counts()
            finally:
                self.manager.release(token)
        return {
            "maps": maps,
            "agents": {
                str(a): {
                    "bytes_in": self._bytes_in.get(a, 0),
                    "bytes_out": self._bytes_out.get(a, 0),
                    "batches": self._applied_batches.get(a, 0),
                }
                for a in sorted(set(self._bytes_in) | set(self._bytes_out))
            },
            "events_tail": self.events.tail(10),
        }

    # ------------------------------------------------------- command interface
    def _command_loop(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._cmd_listener.accept()
            except OSError:
                return
            t = threading.Thread(target=self._handle_command_conn, args=(conn,),
                                 daemon=True)
            t.start()

    def _handle_command_conn(self, conn):
        f = conn.makefile("rw", newline="\n")
        try:
            for line in f:
                reply = self.handle_command(line.strip())
                f.write(reply + "\n")
                f.flush()
                if line.strip() == "shutdown":
                    break
        except (OSError, ValueError):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def handle_command(self, line: str) -> str:
        """Single-line text commands; replies are one line (JSON for stats)."""
        parts = line.split()
        if not parts:
            return "error: empty command"
        cmd = parts[0]
        try:
            if cmd == "stats":
                return json.dumps(self.stats())
            if cmd == "gba" and len(parts) == 2:
                return json.dumps(self.run_gba(int(parts[1])))
            if cmd == "prune" and len(parts) == 3:
                achieved = self.prune(int(parts[1]), int(parts[2]))
                return json.dumps({"map": int(parts[1]), "keyframes": achieved})
            if cmd == "save" and len(parts) == 3:
                return json.dumps({"saved": self.save_map(int(parts[1]), parts[2])})
            if cmd == "load" and len(parts) == 2:
                return json.dumps({"map": self.load_map(parts[1])})
            if cmd == "audit" and len(parts) == 2:
                mid = self.manager.resolve(int(parts[1]))
                problems = self.manager.get_map(mid).audit()
                return json.dumps({"map": mid, "problems": problems})
            if cmd == "shutdown":
                threading.Thread(target=self.stop, daemon=True).start()
                return "bye"
            return f"error: unknown command {line!r}"
        except (KeyError, MapRetiredError, ValueError, OSError) as exc:
            return f"error: {exc}"


def _putative_matches(smap_q, rec_q, smap_c, rec_c):
    """Descriptor matches between query observations and candidate landmarks.

    Returns (query lm_key or None, candidate lm_key, query pixel) triples.
    """
    out = []
    cand = [(lk, smap_c.landmarks[lk].descriptor) for lk in sorted(rec_c.observations)
            if lk in smap_c.landmarks]
    if not cand:
        return out
    cand_mat = np.stack([np.frombuffer(d, dtype=np.uint8) for _, d in cand])
    pop = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint16)
    used = set()
    for q_lm_key, obs in sorted(rec_q.observations.items()):
        q = np.frombuffer(obs.descriptor, dtype=np.uint8)
        dists = pop[cand_mat ^ q].sum(axis=1)
        order = np.argsort(dists)
        for j in order:
            if dists[j] > MATCH_HAMMING_RADIUS:
                break
            ck = cand[j][0]
            if ck in used:
                continue
            used.add(ck)
            out.append((q_lm_key, ck, np.asarray(obs.pixel, dtype=float)))
            break
    return out


def _map_from_bytes(smap: ServerMap, blob: bytes):
    restored = map_from_checkpoint_bytes(blob)
    smap.keyframes = restored.keyframes
    smap.landmarks = restored.landmarks
    smap.lm_observers = restored.lm_observers
    smap.lm_ref = restored.lm_ref
    smap._shared = restored._shared
    smap.loop_edges = restored.loop_edges
    smap.anchors = restored.anchors
    smap.agent_ids = restored.agent_ids
