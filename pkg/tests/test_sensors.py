import math

import numpy as np
import pytest

from geometry import camera_in_body, planar_pose3
from models import BodyState, CameraMount, NoiseConfig, Pose3, ThrusterCommand
from world.dynamics import specific_force, thruster_forces
from world.sensors import (
    project_features,
    project_point,
    rectify,
    sample_accel,
    sample_attitude,
    sample_gyro,
    sample_uwb,
    to_pixels,
)


def _camera_facing(normal_xy, distance=0.4) -> Pose3:
    n = np.asarray(normal_xy, dtype=float)
    c = distance * n
    heading = math.atan2(-n[1], -n[0])
    return planar_pose3(float(c[0]), float(c[1]), heading).compose(camera_in_body(CameraMount()))


class TestUwb:
    def test_noiseless_ranges(self, anchors):
        truth = BodyState(1.0, 2.0, 0.4)
        out = sample_uwb(truth, anchors, None, NoiseConfig.noiseless(), np.random.default_rng(0), stamp=0.5)
        assert [m.anchor_id for m in out] == [0, 1, 2, 3]
        expected = np.linalg.norm(anchors.as_array() - truth.position, axis=1)
        np.testing.assert_allclose([m.range_m for m in out], expected)
        assert all(m.stamp == 0.5 for m in out)

    def test_near_field_dropout(self, anchors):
        truth = BodyState(2.0, 1.55, 0.0)
        out = sample_uwb(truth, anchors, np.array([2.0, 1.5]), NoiseConfig(), np.random.default_rng(0))
        assert out == []

    def test_outside_near_field_keeps_ranging(self, anchors):
        truth = BodyState(2.0, 1.65, 0.0)
        out = sample_uwb(truth, anchors, np.array([2.0, 1.5]), NoiseConfig(), np.random.default_rng(0))
        assert len(out) == 4

    def test_ranges_never_negative(self, anchors):
        truth = BodyState(0.0, 0.0, 0.0)  # on anchor 0
        cfg = NoiseConfig(uwb_inlier_sigma_m=0.5, uwb_outlier_prob=0.0)
        rng = np.random.default_rng(3)
        for _ in range(200):
            assert sample_uwb(truth, anchors, None, cfg, rng)[0].range_m >= 0.0

    def test_outlier_labels(self, anchors):
        truth = BodyState(1.5, 1.5, 0.0)
        cfg = NoiseConfig(uwb_outlier_prob=1.0, uwb_outlier_sigma_m=0.5, uwb_inlier_sigma_m=0.01)
        rng = np.random.default_rng(4)
        out = [m for _ in range(100) for m in sample_uwb(truth, anchors, None, cfg, rng)]
        assert all(m.outlier_component for m in out)
        true_r = np.linalg.norm(anchors.as_array() - truth.position, axis=1)
        for m in out:
            assert m.gross_outlier == (abs(m.range_m - true_r[m.anchor_id]) > 4.0 * 0.01)
        assert any(m.gross_outlier for m in out)

    def test_mixture_statistics(self, anchors):
        truth = BodyState(1.3, 1.7, 0.0)
        cfg = NoiseConfig()
        rng = np.random.default_rng(11)
        true_r = np.linalg.norm(anchors.as_array() - truth.position, axis=1)
        out = [m for _ in range(2500) for m in sample_uwb(truth, anchors, None, cfg, rng)]
        flags = np.array([m.outlier_component for m in out])
        err = np.array([m.range_m - true_r[m.anchor_id] for m in out])
        assert len(out) == 10_000
        assert flags.mean() == pytest.approx(cfg.uwb_outlier_prob, abs=0.01)
        assert err[~flags].std() == pytest.approx(cfg.uwb_inlier_sigma_m, rel=0.05)
        assert err[~flags].var() == pytest.approx(cfg.uwb_inlier_sigma_m ** 2, rel=0.1)
        assert err[flags].std() == pytest.approx(cfg.uwb_outlier_sigma_m, rel=0.2)
        assert abs(err[~flags].mean()) < 4.0 * cfg.uwb_inlier_sigma_m / math.sqrt((~flags).sum())

    def test_inliers_never_labeled(self, anchors):
        cfg = NoiseConfig(uwb_outlier_prob=0.0)
        out = sample_uwb(BodyState(1.0, 1.0, 0.0), anchors, None, cfg, np.random.default_rng(5))
        assert not any(m.outlier_component or m.gross_outlier for m in out)


def test_accel_noiseless_is_specific_force(params):
    truth = BodyState(0.0, 0.0, 0.0, u=0.1, v=0.05, omega=0.2)
    cmd = ThrusterCommand(duties=(0.5, 0.5, 0.0, 0.0))
    z = sample_accel(truth, cmd, params, NoiseConfig.noiseless(), np.random.default_rng(0))
    np.testing.assert_allclose(z, specific_force(truth, thruster_forces(cmd, params), params))


@pytest.mark.parametrize("sampler, sigma_field, true_value", [
    (sample_gyro, "gyro_sigma_radps", 0.7),
    (sample_attitude, "attitude_sigma_rad", 0.4),
])
def test_ahrs_noise_statistics(sampler, sigma_field, true_value):
    truth = BodyState(1.0, 1.0, 0.4, omega=0.7)
    cfg = NoiseConfig()
    sigma = getattr(cfg, sigma_field)
    rng = np.random.default_rng(2)
    draws = np.array([sampler(truth, cfg, rng) for _ in range(10_000)])
    assert abs(draws.mean() - true_value) < 4.0 * sigma / 100.0
    assert draws.std() == pytest.approx(sigma, rel=0.05)


def test_attitude_sample_wraps():
    cfg = NoiseConfig(attitude_sigma_rad=0.05)
    rng = np.random.default_rng(6)
    for _ in range(200):
        assert -math.pi < sample_attitude(BodyState(0.0, 0.0, math.pi), cfg, rng) <= math.pi


@pytest.mark.parametrize("scale", [0.5, 3.0, 40.0])
def test_projection_ignores_depth_scale(scale):
    p = np.array([0.03, -0.02, 0.4])
    u, v = project_point(p)
    us, vs = project_point(scale * p)
    assert us == pytest.approx(u, rel=1e-12)
    assert vs == pytest.approx(v, rel=1e-12)
    assert (u, v) == pytest.approx((0.075, -0.05))


def test_pixel_conversions_invert(intr):
    u, v = to_pixels(0.12, -0.05, intr)
    np.testing.assert_allclose(rectify(u, v, intr), (0.12, -0.05))


def test_project_point_behind_camera():
    assert project_point(np.array([0.1, 0.1, -1.0])) is None
    assert project_point(np.array([0.2, 0.1, 2.0])) == pytest.approx((0.1, 0.05))


class TestFeatures:
    @pytest.mark.parametrize("face_id, normal", [(0, (1, 0)), (1, (0, 1)), (2, (-1, 0)), (3, (0, -1))])
    def test_only_facing_face_visible(self, markers, intr, face_id, normal):
        target = Pose3(np.eye(3), np.zeros(3))
        feats = project_features(
            _camera_facing(normal), target, markers, intr, NoiseConfig.noiseless(), np.random.default_rng(0)
        )
        assert len(feats) == 3
        assert {f.marker_id[0] for f in feats} == {face_id}
        assert sorted(f.marker_id[1] for f in feats) == [0, 1, 2]

    def test_noiseless_projection_matches_pinhole(self, markers, intr):
        cam = _camera_facing((1, 0))
        target = Pose3(np.eye(3), np.zeros(3))
        feats = project_features(cam, target, markers, intr, NoiseConfig.noiseless(), np.random.default_rng(0), stamp=1.25)
        cam_from_world = cam.inverse()
        for f in feats:
            p = markers.face(0).points()[f.marker_id[1]]
            assert (f.u, f.v) == pytest.approx(project_point(cam_from_world.apply(p)))
            assert f.stamp == 1.25

    def test_face_filter(self, markers, intr):
        target = Pose3(np.eye(3), np.zeros(3))
        feats = project_features(
            _camera_facing((1, 0)), target, markers, intr, NoiseConfig.noiseless(), np.random.default_rng(0), faces=[1]
        )
        assert feats == []
