import math

import numpy as np
import pytest

from geometry import is_spd, jacobian_rel_error, numerical_jacobian
from models import AnchorSet, FilterConfig, PlanarPose, RangeMeasurement, ThrusterCommand
from onboard.estimator import (
    CovarianceError,
    EstimatorState,
    accel_jacobian,
    gate_vision_heading,
    initialize,
    mahalanobis_sq,
    predict,
    predicted_accel,
    predicted_range,
    propagate_mean,
    range_jacobian,
    speed,
    transition_matrix,
    trilaterate,
    update_accel,
    update_range,
    update_vision_pose,
)


@pytest.mark.parametrize(
    "zeta, psi, omega, dt",
    [
        (np.array([0.5, 1.0, 0.1, -0.05]), 0.0, 0.0, 0.01),
        (np.array([2.0, 0.3, -0.2, 0.2]), 1.3, 0.7, 0.02),
        (np.array([1.1, 2.9, 0.0, 0.3]), -2.8, -1.0, 0.05),
    ],
)
def test_transition_matrix_matches_finite_differences(params, zeta, psi, omega, dt):
    force = np.array([0.03, -0.01])
    num = numerical_jacobian(lambda z: propagate_mean(z, force, psi, omega, params, dt), zeta)
    assert jacobian_rel_error(transition_matrix(psi, omega, params, dt), num) < 1e-5


def test_accel_jacobian_matches_finite_differences(params):
    zeta = np.array([1.0, 1.0, 0.12, -0.07])
    num = numerical_jacobian(lambda z: predicted_accel(z, np.array([0.02, 0.0]), params), zeta)
    assert jacobian_rel_error(accel_jacobian(params), num) < 1e-5
    mug = params.friction_mu * params.gravity_mps2
    np.testing.assert_allclose(accel_jacobian(params)[:, 2:], -mug * np.eye(2))


@pytest.mark.parametrize("psi", [0.0, 0.9, -2.2])
def test_range_jacobian_matches_finite_differences(psi):
    zeta = np.array([1.3, 0.8, 0.1, 0.0])
    anchor = np.array([3.0, 3.0])
    offset = np.array([0.04, -0.02])
    num = numerical_jacobian(lambda z: np.array([predicted_range(z, anchor, offset, psi)[0]]), zeta)
    assert jacobian_rel_error(range_jacobian(zeta, anchor, offset, psi), num) < 1e-5


def test_mahalanobis_matches_inverse():
    S = np.array([[2.0, 0.3], [0.3, 0.5]])
    nu = np.array([0.4, -0.2])
    assert mahalanobis_sq(nu, S) == pytest.approx(float(nu @ np.linalg.inv(S) @ nu))


def test_mahalanobis_non_pd_raises():
    with pytest.raises(CovarianceError):
        mahalanobis_sq(np.array([1.0, 0.0]), np.array([[1.0, 0.0], [0.0, -1.0]]))


class TestPredict:
    def test_rejects_nonpositive_dt(self, settled_est, params, fcfg):
        with pytest.raises(ValueError):
            predict(settled_est, ThrusterCommand.zero(), 0.0, 0.0, params, fcfg, 0.0)

    def test_moves_along_heading(self, params, fcfg):
        est = EstimatorState(zeta=np.array([1.0, 1.0, 0.1, 0.0]), P=np.eye(4) * 1e-3)
        out = predict(est, ThrusterCommand.zero(), 0.0, math.pi / 2, params, fcfg, 0.1)
        assert out.position[0] == pytest.approx(1.0, abs=1e-12)
        assert out.position[1] > 1.0
        assert out.stamp == pytest.approx(0.1)

    def test_covariance_grows_and_stays_spd(self, settled_est, params, fcfg):
        out = settled_est
        for _ in range(100):
            out = predict(out, ThrusterCommand.zero(), 0.3, 0.5, params, fcfg, 0.01)
            assert is_spd(out.P)
        assert out.position_trace > settled_est.position_trace

    def test_input_state_unchanged(self, settled_est, params, fcfg):
        before = settled_est.zeta.copy()
        predict(settled_est, ThrusterCommand(duties=(1.0, 1.0, 0.0, 0.0)), 0.0, 0.0, params, fcfg, 0.01)
        np.testing.assert_array_equal(settled_est.zeta, before)


class TestRangeUpdate:
    def _meas(self, est, anchors, anchor_id=1, offset=0.0, stamp=0.0):
        r, _ = predicted_range(est.zeta, anchors.as_array()[anchor_id], np.zeros(2), 0.0)
        return RangeMeasurement(anchor_id, r + offset, stamp)

    def test_consistent_range_accepted(self, settled_est, anchors, fcfg):
        m = self._meas(settled_est, anchors, offset=0.01)
        out, gate = update_range(settled_est, m, anchors.as_array()[1], np.zeros(2), 0.0, fcfg)
        assert gate.accepted and gate
        assert gate.weight == 1.0
        assert out.position_trace < settled_est.position_trace
        assert is_spd(out.P)
        assert out.last_range[1] == 0.0

    def test_gross_range_rejected_returns_same_state(self, settled_est, anchors, fcfg):
        m = self._meas(settled_est, anchors, offset=1.0)
        out, gate = update_range(settled_est, m, anchors.as_array()[1], np.zeros(2), 0.0, fcfg)
        assert not gate.accepted
        assert gate.d2 > fcfg.gate_range
        assert out.zeta is settled_est.zeta and out.P is settled_est.P
        assert out.rejected_streak == 1
        assert out.accepted_ranges == settled_est.accepted_ranges

    def test_gating_disabled_accepts(self, settled_est, anchors):
        cfg = FilterConfig(gating_enabled=False)
        m = self._meas(settled_est, anchors, offset=1.0)
        out, gate = update_range(settled_est, m, anchors.as_array()[1], np.zeros(2), 0.0, cfg)
        assert gate.accepted
        assert out is not settled_est

    def test_antenna_on_anchor_is_degenerate(self, anchors, fcfg):
        est = EstimatorState(zeta=np.zeros(4), P=np.eye(4) * 1e-2)
        out, gate = update_range(est, RangeMeasurement(0, 0.05, 0.0), anchors.as_array()[0], np.zeros(2), 0.0, fcfg)
        assert gate.degenerate
        assert not gate.accepted
        assert out is est

    def test_underweighting_after_silence(self, settled_est, anchors, fcfg):
        est = EstimatorState(settled_est.zeta, settled_est.P, last_range={1: 0.0})
        weights = []
        for k in range(7):
            stamp = 1.0 + 0.02 * k
            m = self._meas(est, anchors, stamp=stamp)
            est, gate = update_range(est, m, anchors.as_array()[1], np.zeros(2), 0.0, fcfg)
            assert gate.accepted
            weights.append(gate.weight)
        n = fcfg.underweight_updates
        expected = [fcfg.underweight_factor ** (left / n) for left in range(n, 0, -1)] + [1.0, 1.0]
        np.testing.assert_allclose(weights, expected)

    def test_no_underweighting_without_gap(self, settled_est, anchors, fcfg):
        est = EstimatorState(settled_est.zeta, settled_est.P, last_range={1: 0.9})
        _, gate = update_range(est, self._meas(est, anchors, stamp=1.0), anchors.as_array()[1], np.zeros(2), 0.0, fcfg)
        assert gate.weight == 1.0

    def test_acceptance_clears_rejection_streak(self, settled_est, anchors, fcfg):
        est, gate = update_range(settled_est, self._meas(settled_est, anchors, offset=1.0), anchors.as_array()[1], np.zeros(2), 0.0, fcfg)
        assert not gate.accepted
        est, gate = update_range(est, self._meas(est, anchors), anchors.as_array()[1], np.zeros(2), 0.0, fcfg)
        assert gate.accepted
        assert est.rejected_streak == 0
        assert est.accepted_ranges == 1

    def test_lockout_reopens_position_covariance(self, anchors):
        """A tight estimate 0.4 m off the truth gates out every true range until the reset."""
        cfg = FilterConfig(uwb_sigma_m=0.01)
        truth = np.array([1.5, 1.5])
        est = EstimatorState(zeta=np.array([1.9, 1.9, 0.0, 0.0]), P=np.eye(4) * 1e-4, accepted_ranges=30)
        A = anchors.as_array()
        k = 0

        def true_range(i, stamp):
            return RangeMeasurement(i, float(np.linalg.norm(truth - A[i])), stamp)

        for k in range(cfg.lockout_rejections - 1):
            i = k % len(A)
            est, gate = update_range(est, true_range(i, 0.005 * k), A[i], np.zeros(2), 0.0, cfg)
            assert not gate.accepted and not gate.reset
        assert est.rejected_streak == cfg.lockout_rejections - 1
        k += 1
        i = k % len(A)
        stuck = est
        est, gate = update_range(est, true_range(i, 0.005 * k), A[i], np.zeros(2), 0.0, cfg)
        assert gate.reset and not gate.accepted
        np.testing.assert_array_equal(est.zeta, stuck.zeta)
        np.testing.assert_allclose(np.diag(est.P)[:2], cfg.initial_cov_diag[:2])
        assert est.rejected_streak == 0 and est.accepted_ranges == 0
        assert is_spd(est.P)
        for j in range(1, 21):
            i = (k + j) % len(A)
            est, _ = update_range(est, true_range(i, 0.005 * (k + j)), A[i], np.zeros(2), 0.0, cfg)
        assert np.linalg.norm(est.position - truth) < 0.01
        assert est.accepted_ranges > 0


class TestAccelUpdate:
    def test_matching_accel_accepted(self, settled_est, params, fcfg):
        z = predicted_accel(settled_est.zeta, np.zeros(2), params)
        out, gate = update_accel(settled_est, z, ThrusterCommand.zero(), params, fcfg)
        assert gate.accepted
        assert gate.d2 == pytest.approx(0.0)
        assert out.P[2, 2] < settled_est.P[2, 2]

    def test_wild_accel_rejected(self, settled_est, params, fcfg):
        out, gate = update_accel(settled_est, np.array([10.0, 0.0]), ThrusterCommand.zero(), params, fcfg)
        assert not gate.accepted
        assert gate.d2 > fcfg.gate_vector
        assert out is settled_est

    def test_accel_updates_shrink_velocity_variance(self, params):
        """Fixed UWB-free stream: friction-coupled specific force makes body velocity observable."""
        fcfg = FilterConfig(accel_sigma_mps2=0.01)
        dt = 0.01
        idle = ThrusterCommand.zero()
        z = np.zeros(2)
        start = EstimatorState(zeta=np.zeros(4), P=np.diag(fcfg.initial_cov_diag))
        with_acc = without = start
        for _ in range(5000):
            without = predict(without, idle, 0.0, 0.0, params, fcfg, dt)
            with_acc = predict(with_acc, idle, 0.0, 0.0, params, fcfg, dt)
            with_acc, gate = update_accel(with_acc, z, idle, params, fcfg)
            assert gate.accepted
        assert with_acc.P[2, 2] <= 0.75 * without.P[2, 2]
        assert with_acc.P[3, 3] <= 0.75 * without.P[3, 3]


def test_vision_pose_update(settled_est, fcfg):
    pose = PlanarPose(1.002, 1.499, 0.0, np.diag([1e-6, 1e-6, 1e-6]))
    out, gate = update_vision_pose(settled_est, pose, fcfg)
    assert gate.accepted
    # the covariance floor bounds how far a single fix pulls the state
    assert abs(out.position[0] - 1.0) < 0.002


class TestVisionHeadingGate:
    def _pose(self, psi):
        return PlanarPose(1.0, 1.5, psi, np.diag([1e-6, 1e-6, 1e-6]))

    def test_consistent_heading_accepted(self, fcfg):
        gate = gate_vision_heading(self._pose(0.05), 0.0, fcfg)
        assert gate.accepted
        # variance floored at the configured heading variance
        assert gate.d2 == pytest.approx(0.05 ** 2 / fcfg.vision_cov_diag[2])

    def test_wrong_root_heading_rejected(self, fcfg):
        gate = gate_vision_heading(self._pose(-0.417), 0.003, fcfg)
        assert not gate.accepted
        assert gate.d2 > fcfg.gate_range

    def test_wraps_across_pi(self, fcfg):
        assert gate_vision_heading(self._pose(math.pi - 0.01), -math.pi + 0.01, fcfg).accepted

    def test_disabled_gating_accepts(self):
        assert gate_vision_heading(self._pose(1.0), 0.0, FilterConfig(gating_enabled=False)).accepted


class TestInitialization:
    @pytest.mark.parametrize("psi, offset", [(0.0, (0.0, 0.0)), (0.7, (0.05, 0.02))])
    def test_trilaterate_exact(self, psi, offset):
        anchors = AnchorSet(antenna_offset_m=offset)
        pos = np.array([1.2, 0.7])
        c, s = math.cos(psi), math.sin(psi)
        antenna = pos + np.array([[c, -s], [s, c]]) @ np.asarray(offset)
        ranges = {i: float(np.linalg.norm(antenna - a)) for i, a in enumerate(anchors.as_array())}
        np.testing.assert_allclose(trilaterate(ranges, anchors, psi), pos, atol=1e-6)

    @pytest.mark.parametrize("bad", [0, 2, 3])
    def test_trilaterate_drops_outlier_anchor(self, anchors, bad):
        pos = np.array([1.2, 0.7])
        ranges = {i: float(np.linalg.norm(pos - a)) for i, a in enumerate(anchors.as_array())}
        ranges[bad] += 0.5
        np.testing.assert_allclose(trilaterate(ranges, anchors), pos, atol=1e-6)

    def test_initialize_survives_outlier_round(self, anchors, fcfg):
        pos = np.array([2.0, 1.0])
        meas = [RangeMeasurement(i, float(np.linalg.norm(pos - a)), 0.0) for i, a in enumerate(anchors.as_array())]
        meas[1] = RangeMeasurement(1, meas[1].range_m - 0.6, 0.0, outlier_component=True, gross_outlier=True)
        est = initialize(meas, anchors, 0.0, fcfg)
        np.testing.assert_allclose(est.position, pos, atol=1e-6)

    def test_trilaterate_needs_three(self, anchors):
        with pytest.raises(ValueError):
            trilaterate({0: 1.0, 1: 2.0}, anchors)

    def test_initialize(self, anchors, fcfg):
        pos = np.array([2.0, 1.0])
        meas = [RangeMeasurement(i, float(np.linalg.norm(pos - a)), 0.3) for i, a in enumerate(anchors.as_array())]
        est = initialize(meas, anchors, 0.0, fcfg, stamp=0.3)
        np.testing.assert_allclose(est.position, pos, atol=1e-6)
        np.testing.assert_array_equal(est.body_velocity, np.zeros(2))
        np.testing.assert_allclose(np.diag(est.P), fcfg.initial_cov_diag)
        assert est.last_range == {0: 0.3, 1: 0.3, 2: 0.3, 3: 0.3}
        assert speed(est) == 0.0
