"""Trajectory evaluation: TUM file handling, closed-form alignment, ATE and
scale error, and the experiment orchestrator that drives server plus agents
as subprocesses and writes a CSV/text report.
"""
from __future__ import annotations

import csv
import json
import os
import socket
import subprocess
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lie import Pose, quat_to_rotation, rotation_to_quat

ASSOC_WINDOW = 0.02  # seconds


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray  # (n, 3)
    quaternions: np.ndarray  # (n, 4) as qx qy qz qw

    def __len__(self):
        return len(self.timestamps)

    def poses(self):
        return [Pose(quat_to_rotation(q), p)
                for q, p in zip(self.quaternions, self.positions)]


def read_tum(path) -> Trajectory:
    """Per line: timestamp tx ty tz qx qy qz qw; '#' comments allowed."""
    ts, pos, quat = [], [], []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(x) for x in line.split()]
            if len(vals) != 8:
                raise ValueError(f"bad TUM line in {path}: {line!r}")
            ts.append(vals[0])
            pos.append(vals[1:4])
            quat.append(vals[4:8])
    t = np.asarray(ts)
    if len(t) > 1 and not (np.diff(t) > 0).all():
        raise ValueError(f"timestamps not strictly increasing in {path}")
    return Trajectory(t, np.asarray(pos), np.asarray(quat))


def write_tum(path, trajectory_or_rows):
    if isinstance(trajectory_or_rows, Trajectory):
        rows = zip(trajectory_or_rows.timestamps,
                   trajectory_or_rows.positions, trajectory_or_rows.quaternions)
        with open(path, "w") as f:
            for ts, p, q in rows:
                f.write(f"{ts:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                        f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")
    else:
        with open(path, "w") as f:
            for ts, pose in trajectory_or_rows:
                q = rotation_to_quat(pose.R)
                p = pose.t
                f.write(f"{ts:.6f} {p[0]:.9f} {p[1]:.9f} {p[2]:.9f} "
                        f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n")


def associate(est: Trajectory, gt: Trajectory, window=ASSOC_WINDOW):
    """Greedy nearest-timestamp pairing within the window."""
    pairs = []
    used = set()
    gt_ts = gt.timestamps
    for i, t in enumerate(est.timestamps):
        j = int(np.argmin(np.abs(gt_ts - t)))
        if abs(gt_ts[j] - t) <= window and j not in used:
            pairs.append((i, j))
            used.add(j)
    return pairs


class AlignmentError(Exception):
    pass


def umeyama_align(est: Trajectory, gt: Trajectory, with_scale=False, window=ASSOC_WINDOW):
    """Closed-form similarity (or rigid) alignment minimizing
    sum ||gt - (s R est + t)||^2. Returns (s, R, t)."""
    pairs = associate(est, gt, window)
    if len(pairs) < 3:
        raise AlignmentError(f"only {len(pairs)} associated pairs; need >= 3")
    X = est.positions[[i for i, _ in pairs]]
    Y = gt.positions[[j for _, j in pairs]]
    mx = X.mean(axis=0)
    my = Y.mean(axis=0)
    Xc = X - mx
    Yc = Y - my
    var_x = (Xc ** 2).sum() / len(X)
    if var_x < 1e-12:
        raise AlignmentError("degenerate (collapsed) estimate trajectory")
    cov = Yc.T @ Xc / len(X)
    U, D, Vt = np.linalg.svd(cov)
    if np.linalg.matrix_rank(cov, tol=1e-9 * max(D[0], 1e-12)) < 2:
        raise AlignmentError("degenerate (collinear) trajectory geometry")
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_x) if with_scale else 1.0
    t = my - s * R @ mx
    return s, R, t


def ate_rmse(est: Trajectory, gt: Trajectory, window=ASSOC_WINDOW) -> float:
    """RMSE of translational residuals after rigid alignment (scale kept)."""
    _, R, t = umeyama_align(est, gt, with_scale=False, window=window)
    pairs = associate(est, gt, window)
    X = est.positions[[i for i, _ in pairs]]
    Y = gt.positions[[j for _, j in pairs]]
    res = Y - (X @ R.T + t)
    return float(np.sqrt((res ** 2).sum(axis=1).mean()))


def scale_error(est: Trajectory, gt: Trajectory, window=ASSOC_WINDOW) -> float:
    """|s - 1| * 100 from the similarity alignment, in percent."""
    s, _, _ = umeyama_align(est, gt, with_scale=True, window=window)
    return abs(s - 1.0) * 100.0


def trajectory_from_positions(timestamps, positions, quaternions=None) -> Trajectory:
    n = len(timestamps)
    q = np.tile([0.0, 0.0, 0.0, 1.0], (n, 1)) if quaternions is None else np.asarray(quaternions)
    return Trajectory(np.asarray(timestamps, dtype=float),
                      np.asarray(positions, dtype=float), q)


def map_trajectories(smap) -> dict:
    """Per-agent (timestamp, pose) lists from a server map."""
    out = {}
    for agent in sorted(smap.agent_ids):
        rows = [(smap.keyframes[k].state.timestamp, smap.keyframes[k].state.pose)
                for k in smap.agent_keys(agent)]
        out[agent] = rows
    return out


def trajectory_from_rows(rows) -> Trajectory:
    ts = [r[0] for r in rows]
    pos = [r[1].t for r in rows]
    quat = [rotation_to_quat(r[1].R) for r in rows]
    return Trajectory(np.asarray(ts), np.asarray(pos), np.asarray(quat))


# --------------------------------------------------------------- experiments
def _send_command(host, port, line, timeout=600.0):
    with socket.create_connection((host, port), timeout=timeout) as sock:
        f = sock.makefile("rw", newline="\n")
        f.write(line + "\n")
        f.flush()
        return f.readline().strip()


def run_experiment(scenario_path, out_dir=None) -> dict:
    """Drive one scenario end to end: start the server and agents as
    subprocesses, trigger GBA, collect checkpoints and trajectories, and
    write report.csv / report.txt.

    The scenario file is JSON: {"scene": {...}, "server": {...},
    "repetitions": N, "seeds": [...], "linger": s}.
    """
    scenario_path = Path(scenario_path)
    with open(scenario_path) as f:
        scenario = json.load(f)
    out = Path(out_dir) if out_dir else scenario_path.parent / (scenario_path.stem + "_out")
    out.mkdir(parents=True, exist_ok=True)

    seeds = scenario.get("seeds") or [scenario.get("scene", {}).get("seed", 0)]
    reps = int(scenario.get("repetitions", len(seeds)))
    seeds = (seeds * reps)[:reps]

    rows = []
    for run_idx, seed in enumerate(seeds):
        rows.extend(_run_once(scenario, seed, run_idx, out))

    report_csv = out / "report.csv"
    fields = ["run", "seed", "agent", "kind", "ate_m", "scale_err_pct",
              "n_kf", "n_lm", "bytes_up", "bytes_down", "gba_s", "final_maps", "note"]
    with open(report_csv, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fields)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: r.get(k, "") for k in fields})
    _write_text_report(out / "report.txt", rows)
    return {"rows": rows, "csv": str(report_csv)}


def _python_env():
    env = dict(os.environ)
    pkg_root = str(Path(__file__).resolve().parent.parent)
    env["PYTHONPATH"] = pkg_root + os.pathsep + env.get("PYTHONPATH", "")
    return env


def _run_once(scenario, seed, run_idx, out: Path):
    from .agentsim import SceneConfig

    scene = dict(scenario.get("scene", {}))
    scene["seed"] = seed
    cfg = SceneConfig.from_dict(scene)
    run_dir = out / f"run{run_idx}_seed{seed}"
    run_dir.mkdir(parents=True, exist_ok=True)

    scene_file = run_dir / "scene.json"
    with open(scene_file, "w") as f:
        json.dump(scene, f)

    server_cfg_lines = [f"{k} = {v}" for k, v in scenario.get("server", {}).items()]
    server_cfg_lines += ["port = 0", "command_port = 0",
                         f"event_log = {run_dir / 'events.jsonl'}"]
    server_cfg = run_dir / "server.cfg"
    server_cfg.write_text("\n".join(server_cfg_lines) + "\n")

    env = _python_env()
    ports_file = run_dir / "ports.json"
    server_proc = subprocess.Popen(
        [sys.executable, "-m", "fleetslam.cli", "server",
         "--config", str(server_cfg), "--ports-file", str(ports_file)],
        env=env, stdout=subprocess.DEVNULL, stderr=subprocess.STDOUT,
    )
    rows = []
    note = ""
    try:
        deadline = time.monotonic() + 30.0
        while not ports_file.exists() and time.monotonic() < deadline:
            time.sleep(0.05)
        ports = json.loads(ports_file.read_text())
        host = "127.0.0.1"

        agent_procs = []
        for a in range(cfg.n_agents):
            p = subprocess.Popen(
                [sys.executable, "-m", "fleetslam.cli", "agent",
                 "--config", str(scene_file),
                 "--server", f"{host}:{ports['port']}",
                 "--agent-id", str(a), "--agent-index", str(a),
                 "--seed", str(seed), "--out", str(run_dir),
                 "--linger", str(scenario.get("linger", 2.0))],
                env=env, stdout=subprocess.DEVNULL, stderr=subprocess.STDOUT,
            )
            agent_procs.append(p)
        failures = 0
        for p in agent_procs:
            if p.wait(timeout=600) != 0:
                failures += 1
        if failures:
            note = f"{failures} agent(s) failed"

        stats = json.loads(_send_command(host, ports["command_port"], "stats"))
        map_ids = sorted(int(m) for m in stats["maps"])
        gba_s = 0.0
        for mid in map_ids:
            reply = _send_command(host, ports["command_port"], f"gba {mid}")
            try:
                gba_s += json.loads(reply).get("wall_time", 0.0)
            except json.JSONDecodeError:
                note += f" gba failed: {reply}"
        stats = json.loads(_send_command(host, ports["command_port"], "stats"))
        map_ids = sorted(int(m) for m in stats["maps"])
        for mid in map_ids:
            _send_command(host, ports["command_port"],
                          f"save {mid} {run_dir / f'map_{mid}.cvnm'}")
        _send_command(host, ports["command_port"], "shutdown")
        server_proc.wait(timeout=60)

        rows = _evaluate_run(run_idx, seed, cfg, run_dir, stats, gba_s, note)
    except Exception as exc:
        note = f"run failed: {exc}"
        rows = [{"run": run_idx, "seed": seed, "agent": "", "kind": "failed",
                 "note": note}]
    finally:
        if server_proc.poll() is None:
            server_proc.kill()
    return rows


def _evaluate_run(run_idx, seed, cfg, run_dir: Path, stats, gba_s, note):
    from .mapstore import load_checkpoint

    rows = []
    n_maps = len(stats["maps"])
    checkpoints = sorted(run_dir.glob("map_*.cvnm"))
    server_traj = {}
    counts = {"n_kf": 0, "n_lm": 0}
    for ck in checkpoints:
        smap = load_checkpoint(ck)
        counts["n_kf"] += len(smap.keyframes)
        counts["n_lm"] += len(smap.landmarks)
        for agent, traj_rows in map_trajectories(smap).items():
            server_traj[agent] = trajectory_from_rows(traj_rows)

    global_est_pos, global_gt_pos, global_ts = [], [], []
    t_shift = 0.0
    for a in range(cfg.n_agents):
        gt_file = run_dir / f"agent{a}_gt.tum"
        if not gt_file.exists():
            rows.append({"run": run_idx, "seed": seed, "agent": a, "kind": "missing",
                         "note": "no agent output"})
            continue
        gt = read_tum(gt_file)
        agent_stats = stats["agents"].get(str(a), {})
        for kind, source in (("raw", run_dir / f"agent{a}_raw.tum"),
                             ("corrected", run_dir / f"agent{a}_corrected.tum")):
            est = read_tum(source)
            rows.append({
                "run": run_idx, "seed": seed, "agent": a, "kind": kind,
                "ate_m": round(ate_rmse(est, gt), 6),
                "scale_err_pct": round(scale_error(est, gt), 4),
                "bytes_up": agent_stats.get("bytes_in", 0),
                "bytes_down": agent_stats.get("bytes_out", 0),
                "note": note,
            })
        if a in server_traj:
            est = server_traj[a]
            rows.append({
                "run": run_idx, "seed": seed, "agent": a, "kind": "server",
                "ate_m": round(ate_rmse(est, gt), 6),
                "scale_err_pct": round(scale_error(est, gt), 4),
                "note": note,
            })
            pairs = associate(est, gt)
            global_est_pos.extend(est.positions[[i for i, _ in pairs]])
            global_gt_pos.extend(gt.positions[[j for _, j in pairs]])
            global_ts.extend(np.asarray(est.timestamps)[[i for i, _ in pairs]] + t_shift)
        t_shift += 1e6  # keep per-agent timestamps disjoint in the joint set

    if global_est_pos:
        est_all = trajectory_from_positions(global_ts, global_est_pos)
        gt_all = trajectory_from_positions(global_ts, global_gt_pos)
        rows.append({
            "run": run_idx, "seed": seed, "agent": "all", "kind": "global",
            "ate_m": round(ate_rmse(est_all, gt_all), 6),
            "scale_err_pct": round(scale_error(est_all, gt_all), 4),
            "n_kf": counts["n_kf"], "n_lm": counts["n_lm"],
            "gba_s": round(gba_s, 3), "final_maps": n_maps, "note": note,
        })
    return rows


def _write_text_report(path, rows):
    lines = ["trajectory report (ATE after rigid alignment; scale via similarity fit)",
             ""]
    header = f"{'run':>4} {'agent':>6} {'kind':>10} {'ATE[m]':>12} {'scale[%]':>9} {'maps':>5}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in rows:
        lines.append(
            f"{r.get('run', ''):>4} {str(r.get('agent', '')):>6} {r.get('kind', ''):>10} "
            f"{str(r.get('ate_m', '')):>12} {str(r.get('scale_err_pct', '')):>9} "
            f"{str(r.get('final_maps', '')):>5}"
        )
    kinds = {}
    for r in rows:
        if isinstance(r.get("ate_m"), (int, float)):
            kinds.setdefault(r["kind"], []).append(r["ate_m"])
    lines.append("")
    for kind, vals in sorted(kinds.items()):
        lines.append(f"mean ATE [{kind}]: {np.mean(vals):.6f} m over {len(vals)} entries")
    Path(path).write_text("\n".join(lines) + "\n")
