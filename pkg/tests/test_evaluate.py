import numpy as np
import pytest

from fleetslam.evaluate import (AlignmentError, Trajectory, associate, ate_rmse,
                                read_tum, scale_error, trajectory_from_positions,
                                umeyama_align, write_tum)
from fleetslam.lie import Pose, so3_exp


def helix(n=40, seed=0):
    rng = np.random.default_rng(seed)
    t = np.linspace(0, 10, n)
    pos = np.stack([np.cos(t), np.sin(t), 0.1 * t], axis=1) * 3 + rng.normal(size=(n, 3)) * 0.01
    return trajectory_from_positions(t, pos)


def test_identity_alignment():
    gt = helix()
    s, R, t = umeyama_align(gt, gt, with_scale=True)
    assert s == pytest.approx(1.0)
    assert np.allclose(R, np.eye(3), atol=1e-12)
    assert np.allclose(t, 0, atol=1e-12)
    assert ate_rmse(gt, gt) == pytest.approx(0.0, abs=1e-12)
    assert scale_error(gt, gt) == pytest.approx(0.0, abs=1e-9)


def test_pure_scaling_recovered():
    gt = helix()
    est = trajectory_from_positions(gt.timestamps, 0.5 * gt.positions)
    s, _, _ = umeyama_align(est, gt, with_scale=True)
    assert s == pytest.approx(2.0)
    # the convention: minimize ||gt - (s R est + t)||^2
    assert scale_error(est, gt) == pytest.approx(100.0)


def test_scale_error_definition():
    est = helix()
    gt = trajectory_from_positions(est.timestamps, 1.01 * est.positions)
    assert scale_error(est, gt) == pytest.approx(1.0, abs=1e-6)


def test_similarity_round_trip(rng):
    gt = helix()
    s_true = 1.37
    R_true = so3_exp(rng.normal(size=3))
    t_true = rng.normal(size=3) * 5
    est_pos = (gt.positions - t_true) @ R_true / s_true  # gt = s R est + t
    est = trajectory_from_positions(gt.timestamps, est_pos)
    s, R, t = umeyama_align(est, gt, with_scale=True)
    assert s == pytest.approx(s_true, abs=1e-9)
    assert np.allclose(R, R_true, atol=1e-9)
    assert np.allclose(t, t_true, atol=1e-8)
    aligned = est.positions * s @ R.T + t
    assert np.allclose(aligned, gt.positions, atol=1e-8)


def test_ate_invariant_under_rigid_transform(rng):
    gt = helix()
    est = trajectory_from_positions(gt.timestamps,
                                    gt.positions + rng.normal(size=gt.positions.shape) * 0.05)
    base = ate_rmse(est, gt)
    T = Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3) * 10)
    moved = trajectory_from_positions(est.timestamps, est.positions @ T.R.T + T.t)
    assert ate_rmse(moved, gt) == pytest.approx(base, abs=1e-9)
    assert scale_error(moved, gt) == pytest.approx(scale_error(est, gt), abs=1e-9)


def test_ate_matches_brute_force_alignment(rng):
    """Independent oracle: optimize the rigid alignment numerically and
    compare the residual RMSE with ate_rmse."""
    from scipy.optimize import minimize

    gt = helix(n=25)
    est = trajectory_from_positions(
        gt.timestamps, gt.positions + rng.normal(size=(25, 3)) * 0.1)

    def cost(x):
        R = so3_exp(x[:3])
        res = gt.positions - (est.positions @ R.T + x[3:])
        return (res ** 2).sum()

    best = min(
        (minimize(cost, np.concatenate([w0, t0]), method="Nelder-Mead",
                  options={"maxiter": 20000, "xatol": 1e-12, "fatol": 1e-15})
         for w0 in (np.zeros(3), np.array([0.1, -0.1, 0.1]))
         for t0 in (np.zeros(3), np.ones(3))),
        key=lambda r: r.fun,
    )
    oracle = np.sqrt(best.fun / 25)
    assert ate_rmse(est, gt) == pytest.approx(oracle, abs=1e-5)


def test_alignment_degenerate_rejected():
    ts = np.arange(4.0)
    collapsed = trajectory_from_positions(ts, np.zeros((4, 3)))
    gt = helix(n=4)
    with pytest.raises(AlignmentError):
        umeyama_align(collapsed, gt)
    short = trajectory_from_positions([0.0, 1.0], [[0, 0, 0], [1, 0, 0]])
    with pytest.raises(AlignmentError):
        umeyama_align(short, trajectory_from_positions([0.0, 1.0], [[0, 0, 0], [1, 0, 0]]))


def test_association_window():
    a = trajectory_from_positions([0.0, 1.0, 2.0], np.zeros((3, 3)))
    b = trajectory_from_positions([0.005, 1.3, 1.995], np.zeros((3, 3)))
    pairs = associate(a, b, window=0.02)
    assert pairs == [(0, 0), (2, 2)]


def test_tum_round_trip(tmp_path, rng):
    rows = [(float(i) * 0.5, Pose(so3_exp(rng.normal(size=3)), rng.normal(size=3)))
            for i in range(10)]
    path = tmp_path / "traj.tum"
    write_tum(path, rows)
    traj = read_tum(path)
    assert len(traj) == 10
    for (ts, pose), p, q in zip(rows, traj.positions, traj.quaternions):
        assert np.allclose(pose.t, p, atol=1e-8)
    # strictly increasing enforcement
    bad = tmp_path / "bad.tum"
    bad.write_text("1.0 0 0 0 0 0 0 1\n0.5 0 0 0 0 0 0 1\n")
    with pytest.raises(ValueError):
        read_tum(bad)
