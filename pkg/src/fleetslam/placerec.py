"""Place recognition: candidate retrieval by descriptor voting, geometric
verification with a P3P RANSAC plus nonlinear refinement, and the dispatch
into loop closure (same map) or map fusion (different maps).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .lie import Pose, so3_exp
from .mapstore import LoopEdge, MapManager, MapRetiredError, ServerMap
from .optimizer import Problem, SolverConfig, solve
from .problems import ReprojectionGroup
from .types import hamming_distance

VOTE_HAMMING_RADIUS = 16
MATCH_HAMMING_RADIUS = 32
TEMPORAL_MASK = 30
TOP_K = 5
MIN_VOTES = 5
RANSAC_MAX_ITERS = 300
RANSAC_INLIER_PX = 4.0
EXTEND_RADIUS_PX = 8.0
MIN_ACCEPT_INLIERS = 20


@dataclass
class MatchResult:
    key_query: tuple
    key_candidate: tuple
    T_cq: Pose  # maps query body-frame points into the candidate body frame
    inlier_pairs: list  # (query lm_key or None, candidate lm_key)
    inliers: int


def query_candidates(query_key, query_descriptors, database, top_k=TOP_K,
                     min_votes=MIN_VOTES, temporal_mask=TEMPORAL_MASK):
    """Top-K keyframes by descriptor votes, skipping the query's own recent
    same-agent keyframes."""
    agent_id, kf_id = query_key
    exclude = {query_key}
    with database._lock:
        keys = list(database._entries.keys())
    for k in keys:
        if k[0] == agent_id and abs(k[1] - kf_id) <= temporal_mask:
            exclude.add(k)
    votes = database.vote(query_descriptors, VOTE_HAMMING_RADIUS, exclude_keys=exclude)
    ranked = sorted(votes.items(), key=lambda kv: (-kv[1], kv[0]))
    return [k for k, v in ranked[:top_k] if v >= min_votes]


def p3p_solutions(world_points, bearings):
    """Grunert's three-point pose: camera-frame depths along three bearings.

    Returns candidate (R, t) with p_cam = R p_world + t; up to four solutions.
    """
    P = np.asarray(world_points, dtype=float)
    f = np.asarray(bearings, dtype=float)
    f = f / np.linalg.norm(f, axis=1, keepdims=True)

    a2 = float(np.sum((P[1] - P[2]) ** 2))
    b2 = float(np.sum((P[0] - P[2]) ** 2))
    c2 = float(np.sum((P[0] - P[1]) ** 2))
    if min(a2, b2, c2) < 1e-12 or b2 < 1e-12:
        return []
    cos_a = float(f[1] @ f[2])
    cos_b = float(f[0] @ f[2])
    cos_g = float(f[0] @ f[1])

    # u = s2/s1 as a rational function of v = s3/s1, then a quartic in v
    q = np.polynomial.Polynomial
    base = q([1.0, -2.0 * cos_b, 1.0])  # 1 - 2 v cos_b + v^2
    N = ((a2 - c2) / b2) * base + q([1.0, 0.0, -1.0])  # numerator of u(v)
    D = q([2.0 * cos_g, -2.0 * cos_a])  # denominator of u(v)
    poly = N * N - 2.0 * cos_g * N * D + D * D * (q([1.0]) - (c2 / b2) * base)
    coeffs = poly.coef
    if np.abs(coeffs).max() < 1e-15:
        return []
    roots = np.roots(coeffs[::-1])

    solutions = []
    for v in roots:
        if abs(v.imag) > 1e-8 or v.real <= 0:
            continue
        v = float(v.real)
        denom = D(v)
        if abs(denom) < 1e-12:
            continue
        u = float(N(v) / denom)
        if u <= 0:
            continue
        s1_sq = b2 / (1.0 + v * v - 2.0 * v * cos_b)
        if s1_sq <= 0:
            continue
        s1 = np.sqrt(s1_sq)
        depths = np.array([s1, u * s1, v * s1])
        X = f * depths[:, None]
        Rt = _absolute_orientation(P, X)
        if Rt is not None:
            solutions.append(Rt)
    return solutions


def _absolute_orientation(P_world, X_cam):
    """Least-squares rigid fit X = R P + t over point pairs (Kabsch)."""
    cw = P_world.mean(axis=0)
    cc = X_cam.mean(axis=0)
    H = (P_world - cw).T @ (X_cam - cc)
    U, _, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    if not np.isfinite(R).all():
        return None
    t = cc - R @ cw
    return R, t


def _bearings(intr, pixels):
    pixels = np.asarray(pixels, dtype=float).reshape(-1, 2)
    x = (pixels[:, 0] - intr.cx) / intr.fx
    y = (pixels[:, 1] - intr.cy) / intr.fy
    f = np.stack([x, y, np.ones(len(pixels))], axis=1)
    return f / np.linalg.norm(f, axis=1, keepdims=True)


def _project_pix(intr, R, t, points):
    """Project world points through p_cam = R p + t; NaN when behind."""
    pc = points @ R.T + t
    z = pc[:, 2]
    uv = np.full((len(points), 2), np.nan)
    ok = z > 0.01
    uv[ok, 0] = intr.fx * pc[ok, 0] / z[ok] + intr.cx
    uv[ok, 1] = intr.fy * pc[ok, 1] / z[ok] + intr.cy
    return uv


def verify_ransac(query_map: ServerMap, query_key, cand_map: ServerMap, cand_key,
                  correspondences, seed=0, max_iters=RANSAC_MAX_ITERS,
                  inlier_px=RANSAC_INLIER_PX, accept_inliers=MIN_ACCEPT_INLIERS):
    """3D-2D RANSAC over candidate-landmark/query-pixel pairs with refinement.

    correspondences: list of (query lm_key or None, candidate lm_key, query pixel).
    Returns a MatchResult or None.
    """
    if len(correspondences) < 4:
        return None
    rng = np.random.default_rng(seed)
    q_rec = query_map.keyframes[query_key]
    c_rec = cand_map.keyframes[cand_key]
    intr = q_rec.intrinsics

    world = np.stack([cand_map.landmarks[c].position for _, c, _ in correspondences])
    pixels = np.stack([np.asarray(px, dtype=float) for _, _, px in correspondences])
    bearings = _bearings(intr, pixels)
    n = len(correspondences)

    best_inliers = None
    best_count = 0
    needed = max_iters
    done = 0
    while done < min(needed, max_iters):
        done += 1
        sample = rng.choice(n, size=4, replace=False)
        for R, t in p3p_solutions(world[sample[:3]], bearings[sample[:3]]):
            uv = _project_pix(intr, R, t, world)
            err = np.linalg.norm(uv - pixels, axis=1)
            inl = err < inlier_px
            # the 4th sampled point disambiguates the up-to-4 P3P solutions
            if not inl[sample[3]]:
                continue
            count = int(inl.sum())
            if count > best_count:
                best_count = count
                best_inliers = inl
                # adaptive termination at 99.9% confidence
                w = max(count / n, 1e-3)
                needed = int(np.ceil(np.log(1e-3) / np.log(1.0 - min(w ** 3, 0.9999))))
    if best_inliers is None or best_count < 4:
        return None

    if not q_rec.observations:
        return None

    # refine the query body pose in the candidate map over the inlier set
    T_CS = intr.T_CS
    R_cam, t_cam = _refit_pose(world[best_inliers], bearings[best_inliers])
    if R_cam is None:
        return None
    T_cam = Pose(R_cam, t_cam)  # candidate-world -> query camera
    T_WcSq = T_cam.inverse().compose(T_CS)  # query body pose in candidate world
    T_WcSq = _refine_pose(T_WcSq, intr, world[best_inliers], pixels[best_inliers])

    # extended matching: project candidate landmarks, match descriptors
    cand_lms = sorted(c_rec.observations)
    cand_pos = np.stack([cand_map.landmarks[k].position for k in cand_lms])
    R_qc = T_CS.R @ T_WcSq.R.T
    t_qc = -R_qc @ T_WcSq.t + T_CS.t
    uv = _project_pix(intr, R_qc, t_qc, cand_pos)
    q_obs = list(q_rec.observations.items())
    q_px = np.stack([np.asarray(o.pixel, dtype=float) for _, o in q_obs])
    pairs = []
    used_q = set()
    for ci, ck in enumerate(cand_lms):
        if np.isnan(uv[ci, 0]):
            continue
        d2 = np.linalg.norm(q_px - uv[ci], axis=1)
        order = np.argsort(d2)
        for qi in order:
            if d2[qi] > EXTEND_RADIUS_PX:
                break
            qk, obs = q_obs[qi]
            if qk in used_q:
                continue
            cd = cand_map.landmarks[ck].descriptor
            if hamming_distance(obs.descriptor, cd) <= MATCH_HAMMING_RADIUS:
                pairs.append((qk, ck))
                used_q.add(qk)
                break
    if len(pairs) < accept_inliers:
        return None

    T_cq = c_rec.state.pose.inverse().compose(T_WcSq)
    return MatchResult(query_key, cand_key, T_cq, pairs, len(pairs))


def _refit_pose(world, bearings):
    """Non-minimal pose fit: iterate depth estimation and absolute orientation."""
    # initialize from a P3P solve on a well-spread triple
    sols = p3p_solutions(world[:3], bearings[:3])
    if not sols:
        return None, None
    best = None
    best_err = np.inf
    for R, t in sols:
        pc = world @ R.T + t
        err = np.linalg.norm(pc / np.maximum(pc[:, 2:3], 1e-9) - bearings / bearings[:, 2:3], axis=1).sum()
        if err < best_err:
            best_err = err
            best = (R, t)
    R, t = best
    for _ in range(10):
        depths = (world @ R.T + t)[:, 2]
        X = bearings / bearings[:, 2:3] * depths[:, None]
        fit = _absolute_orientation(world, X)
        if fit is None:
            break
        R, t = fit
    return R, t


def _refine_pose(T_WcSq: Pose, intr, world_points, pixels):
    """Levenberg-Marquardt refinement of one body pose over fixed landmarks."""
    problem = Problem()
    problem.add_pose_block("pose", T_WcSq)
    entries = []
    for i, (p, px) in enumerate(zip(world_points, pixels)):
        key = ("pt", i)
        problem.add_vector_block(key, p, constant=True)
        entries.append(("pose", key, px, intr))
    problem.add_group(ReprojectionGroup(entries, sigma_px=1.0, loss=None))
    solve(problem, SolverConfig(max_iters=15))
    return problem.value("pose")


def dispatch(match: MatchResult, manager: MapManager, pgo_runner=None, retries=1):
    """Route an accepted match: loop closure within one map, fusion across two.

    Returns ("loop", map_id), ("fusion", merged_id) or ("duplicate", map_id).
    pgo_runner(map_id) is invoked after the edge is recorded / maps merged.
    """
    try:
        map_q = manager.kf_database.map_of(match.key_query)
        map_c = manager.kf_database.map_of(match.key_candidate)
        if map_q is None or map_c is None:
            return ("stale", None)
        map_q = manager.resolve(map_q)
        map_c = manager.resolve(map_c)

        if map_q == map_c:
            tok = manager.acquire(map_q, "exclusive")
            try:
                smap = manager.get_map(map_q)
                pair = tuple(sorted((match.key_query, match.key_candidate)))
                if any(e.pair == pair for e in smap.loop_edges):
                    return ("duplicate", map_q)
                smap.loop_edges.append(
                    LoopEdge(match.key_query, match.key_candidate, match.T_cq, match.inliers)
                )
            finally:
                manager.release(tok)
            if pgo_runner is not None:
                pgo_runner(map_q)
            return ("loop", map_q)

        first, second = sorted((map_q, map_c))
        tok1 = manager.acquire(first, "exclusive")
        tok2 = manager.acquire(second, "exclusive")
        try:
            merged = manager.merge_maps(
                map_q, map_c, match.key_query, match.key_candidate,
                match.T_cq, match.inlier_pairs,
            )
        finally:
            manager.release(tok2)
            manager.release(tok1)
        if pgo_runner is not None:
            pgo_runner(merged)
        return ("fusion", merged)
    except MapRetiredError:
        if retries > 0:
            return dispatch(match, manager, pgo_runner, retries - 1)
        return ("stale", None)
