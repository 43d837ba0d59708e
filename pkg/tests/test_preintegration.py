import numpy as np
import pytest

from fleetslam.lie import so3_exp
from fleetslam.preintegration import (ImuNoise, chain_preintegrations,
                                      imu_preintegrate)
from fleetslam.types import ImuSample


def test_empty_samples_rejected():
    with pytest.raises(ValueError):
        imu_preintegrate([], np.zeros(3), np.zeros(3))


def test_bad_dt_rejected():
    with pytest.raises(ValueError):
        imu_preintegrate([ImuSample(np.zeros(3), np.zeros(3), 0.5)],
                         np.zeros(3), np.zeros(3))


def test_stationary_zero_input():
    # zero specific force input integrates to zero deltas; gravity is the
    # residual's business, not the preintegration's
    samples = [ImuSample(np.zeros(3), np.zeros(3), 0.005) for _ in range(100)]
    p = imu_preintegrate(samples, np.zeros(3), np.zeros(3))
    assert np.allclose(p.delta_R, np.eye(3))
    assert np.allclose(p.delta_v, 0)
    assert np.allclose(p.delta_p, 0)
    assert p.dt_total == pytest.approx(0.5)


def test_constant_gyro_closed_form():
    omega = np.array([0.0, 0.0, 0.5])
    samples = [ImuSample(np.zeros(3), omega, 1e-3) for _ in range(1000)]
    p = imu_preintegrate(samples, np.zeros(3), np.zeros(3))
    assert np.allclose(p.delta_R, so3_exp(omega * 1.0), atol=1e-9)


def test_constant_acc_closed_form():
    acc = np.array([2.0, 0.0, 0.0])
    samples = [ImuSample(acc, np.zeros(3), 1e-3) for _ in range(1000)]
    p = imu_preintegrate(samples, np.zeros(3), np.zeros(3))
    assert np.allclose(p.delta_v, [2.0, 0, 0], atol=1e-6)
    assert np.allclose(p.delta_p, [1.0, 0, 0], atol=1e-6)


def test_covariance_spd_and_trace_monotone(rng):
    samples = [ImuSample(rng.normal(size=3) * 3, rng.normal(size=3), 0.005)
               for _ in range(120)]
    prev_trace = 0.0
    for n in (1, 10, 40, 120):
        p = imu_preintegrate(samples[:n], np.zeros(3), np.zeros(3),
                             ImuNoise(sigma_gyro=1e-3, sigma_acc=1e-2))
        ev = np.linalg.eigvalsh(p.covariance)
        assert (ev > 0).all()
        assert np.allclose(p.covariance, p.covariance.T)
        trace = np.trace(p.covariance)
        assert trace >= prev_trace
        prev_trace = trace


def test_bias_correction_via_jacobians(rng):
    """First-order corrected deltas track full re-integration to O(|db|^2)."""
    samples = [ImuSample(rng.normal(size=3) * 2, rng.normal(size=3) * 0.5, 0.005)
               for _ in range(150)]
    bar_g, bar_a = rng.normal(size=3) * 0.01, rng.normal(size=3) * 0.05
    p = imu_preintegrate(samples, bar_g, bar_a)

    def gap(scale):
        db = np.ones(3) * scale
        dR, dv, dp = p.corrected_deltas(bar_g + db, bar_a + db)
        q = imu_preintegrate(samples, bar_g + db, bar_a + db)
        return (np.linalg.norm(dR - q.delta_R) + np.linalg.norm(dv - q.delta_v)
                + np.linalg.norm(dp - q.delta_p))

    ratio = gap(1e-3) / gap(1e-4)
    assert 50 < ratio < 200


def test_chaining_matches_direct_integration(rng):
    samples = [ImuSample(rng.normal(size=3) * 2, rng.normal(size=3) * 0.5, 0.005)
               for _ in range(100)]
    bar_g, bar_a = np.zeros(3), np.zeros(3)
    first = imu_preintegrate(samples[:60], bar_g, bar_a)
    second = imu_preintegrate(samples[60:], bar_g, bar_a)
    chained = chain_preintegrations(first, second)
    direct = imu_preintegrate(samples, bar_g, bar_a)
    assert np.allclose(chained.delta_R, direct.delta_R, atol=1e-6)
    assert np.allclose(chained.delta_v, direct.delta_v, atol=1e-6)
    assert np.allclose(chained.delta_p, direct.delta_p, atol=1e-6)
    assert chained.dt_total == pytest.approx(direct.dt_total)
    ev = np.linalg.eigvalsh(chained.covariance)
    assert (ev > 0).all()


def test_chaining_bias_jacobians_first_order(rng):
    """Chained bias Jacobians predict the re-integrated chain to O(|db|^2)."""
    samples = [ImuSample(rng.normal(size=3) * 2, rng.normal(size=3) * 0.5, 0.005)
               for _ in range(100)]
    bar = np.zeros(3)
    first = imu_preintegrate(samples[:50], bar, bar)
    second = imu_preintegrate(samples[50:], bar, bar)
    chained = chain_preintegrations(first, second)

    def gap(scale):
        db = np.ones(3) * scale
        dR, dv, dp = chained.corrected_deltas(db, db)
        q = imu_preintegrate(samples, db, db)
        return (np.linalg.norm(dR - q.delta_R) + np.linalg.norm(dv - q.delta_v)
                + np.linalg.norm(dp - q.delta_p))

    ratio = gap(1e-3) / gap(1e-4)
    assert 30 < ratio < 300


def test_chaining_respects_different_linearization_points(rng):
    """Second segment linearized at a different bias gets re-linearized."""
    samples = [ImuSample(rng.normal(size=3) * 2, rng.normal(size=3) * 0.5, 0.005)
               for _ in range(80)]
    b1 = np.zeros(3)
    b2 = np.ones(3) * 1e-3
    first = imu_preintegrate(samples[:40], b1, b1)
    second = imu_preintegrate(samples[40:], b2, b2)
    chained = chain_preintegrations(first, second)
    direct = imu_preintegrate(samples, b1, b1)
    assert np.allclose(chained.delta_R, direct.delta_R, atol=1e-4)
    assert np.allclose(chained.delta_v, direct.delta_v, atol=1e-4)
    assert np.allclose(chained.delta_p, direct.delta_p, atol=1e-4)
