import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from app.controller import target_module_pose
from app.selfcheck import SelfCheckConfig, check_p3p_roundtrip
from geometry import camera_in_body, jacobian_rel_error, numerical_jacobian, planar_pose3, rotation_angle, wrap_angle
from models import CameraMount, FeatureObservation, MarkerFace, MarkerSet, NoiseConfig, Pose3, TargetConfig, VisionConfig
from onboard.vision import (
    AmbiguousFaceError,
    Correspondence,
    DegenerateGeometryError,
    NoFaceError,
    NotConvergedError,
    NoValidPoseError,
    PoseCandidate,
    VisionState,
    camera_rate,
    correspondences_from_labels,
    covariance_healthy,
    disambiguate,
    feature_jacobian,
    feature_model,
    identify_face,
    init_vision_state,
    p3p_solve,
    planar_pose_output,
    prior_from_estimate,
    solve_pose,
    vision_ekf_update,
    vision_predict,
)
from world.sensors import project_features

NORMALS = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}


def _camera_facing(normal_xy, distance=0.4, lateral=0.015) -> Pose3:
    # image plane stays parallel to the face; the lateral shift keeps the camera off the face axis
    n = np.asarray(normal_xy, dtype=float)
    c = distance * n + lateral * np.array([-n[1], n[0]])
    return planar_pose3(float(c[0]), float(c[1]), math.atan2(-n[1], -n[0])).compose(camera_in_body(CameraMount()))


def _features(markers, intr, face_id, noise=None, seed=0, distance=0.4):
    target = Pose3(np.eye(3), np.zeros(3))
    cam = _camera_facing(NORMALS[face_id], distance)
    feats = project_features(cam, target, markers, intr, noise or NoiseConfig.noiseless(), np.random.default_rng(seed))
    return feats, cam.inverse().compose(target)


class TestFaceIdentification:
    @pytest.mark.parametrize("face_id", [0, 1, 2, 3])
    def test_fronto_parallel_face(self, markers, intr, face_id):
        feats, _ = _features(markers, intr, face_id)
        match = identify_face(feats, markers)
        assert match.face_id == face_id
        assert match.score < 1e-9
        # roles map back onto the labelled markers
        for c in match.correspondences:
            f = next(f for f in feats if f.marker_id[1] == c.marker_index)
            assert (c.u, c.v) == (f.u, f.v)

    def test_order_independent(self, markers, intr):
        feats, _ = _features(markers, intr, 2)
        a = identify_face(feats, markers)
        b = identify_face(list(reversed(feats)), markers)
        assert a.face_id == b.face_id
        assert [c.marker_index for c in a.correspondences] == [c.marker_index for c in b.correspondences]

    def test_too_few_features(self, markers):
        with pytest.raises(NoFaceError):
            identify_face([FeatureObservation(0.0, 0.0, 0.0), FeatureObservation(0.1, 0.0, 0.0)], markers)

    EQUILATERAL = [
        FeatureObservation(0.0, 0.0, 0.0),
        FeatureObservation(0.1, 0.0, 0.0),
        FeatureObservation(0.05, 0.05 * math.sqrt(3.0), 0.0),
    ]

    def test_unknown_pattern(self, markers):
        with pytest.raises(NoFaceError):
            identify_face(self.EQUILATERAL, markers)

    def test_near_symmetric_face_is_ambiguous(self):
        # edges 0.0495 / 0.0500 / 0.0505: a valid face, but its edge ranks sit inside the match tolerance
        face = MarkerFace(face_id=7, normal=(0, 0, 1), markers=[(0, 0, 0), (0.05, 0, 0), (0.026, 0.0433, 0)])
        with pytest.raises(AmbiguousFaceError):
            identify_face(self.EQUILATERAL, MarkerSet(faces=[face]))


class TestP3P:
    def test_recovers_true_pose(self, markers, intr):
        feats, truth = _features(markers, intr, 0)
        corr = correspondences_from_labels(feats, markers)
        cands = p3p_solve(corr)
        assert 1 <= len(cands) <= 4
        best = min(cands, key=lambda c: np.linalg.norm(c.t - truth.t) + rotation_angle(c.R, truth.R))
        np.testing.assert_allclose(best.t, truth.t, atol=1e-6)
        assert rotation_angle(best.R, truth.R) < 1e-6
        for c in cands:
            np.testing.assert_allclose(c.R.T @ c.R, np.eye(3), atol=1e-9)
            assert c.depths_positive(corr)
            assert c.residual < 1e-4

    def test_collinear_markers(self):
        pts = [np.array([0.0, 0.0, 0.0]), np.array([0.1, 0.0, 0.0]), np.array([0.2, 0.0, 0.0])]
        corr = [Correspondence(p, 0.01 * i, 0.02 * i + 0.001, i) for i, p in enumerate(pts)]
        with pytest.raises(DegenerateGeometryError):
            p3p_solve(corr)

    def test_needs_three(self):
        with pytest.raises(ValueError):
            p3p_solve([])

    def test_disambiguate_by_prior(self):
        a = PoseCandidate(np.eye(3), np.array([0.0, 0.0, 1.0]))
        b = PoseCandidate(Rotation.from_rotvec([0.0, 0.3, 0.0]).as_matrix(), np.array([0.05, 0.0, 1.1]))
        prior = PoseCandidate(np.eye(3), np.array([0.0, 0.0, 1.01]))
        assert disambiguate([b, a], prior=prior) is a

    def test_disambiguate_empty(self):
        with pytest.raises(ValueError):
            disambiguate([])

    def test_disambiguate_by_fourth_point(self):
        a = PoseCandidate(np.eye(3), np.array([0.0, 0.0, 0.5]))
        b = PoseCandidate(Rotation.from_rotvec([0.0, 0.3, 0.0]).as_matrix(), np.array([0.01, 0.0, 0.5]))
        m4 = np.array([0.03, -0.02, 0.01])
        p = a.transform(m4)
        fourth = Correspondence(m4, p[0] / p[2], p[1] / p[2], 3)
        assert disambiguate([b, a], fourth_point=fourth) is a
        # the fourth feature outranks a prior sitting on the wrong root
        assert disambiguate([b, a], prior=b, fourth_point=fourth) is a

    def test_prior_angle_bound(self):
        a = PoseCandidate(np.eye(3), np.array([0.0, 0.0, 0.5]))
        far = PoseCandidate(Rotation.from_rotvec([0.0, 0.0, 0.6]).as_matrix(), a.t)
        assert disambiguate([a], prior=far) is a
        with pytest.raises(NoValidPoseError):
            disambiguate([a], prior=far, max_prior_angle=0.3)

    @pytest.mark.parametrize("x", [1.90, 1.93, 1.96])
    @pytest.mark.parametrize("psi", [0.0, 0.01, 0.05])
    def test_estimate_prior_picks_true_root_at_docking_range(self, markers, intr, x, psi):
        mount = CameraMount(offset_m=(0.05, 0.0))
        body_from_camera = camera_in_body(mount)
        target_world = target_module_pose(TargetConfig(x_m=2.0, y_m=1.5, psi_rad=0.0))
        cam = planar_pose3(x, 1.5, psi).compose(body_from_camera)
        feats = project_features(cam, target_world, markers, intr, NoiseConfig.noiseless(), np.random.default_rng(0))
        truth = cam.inverse().compose(target_world)
        # navigation estimate a few cm and ~0.5 deg off
        prior = prior_from_estimate((x + 0.02, 1.49), psi + 0.01, body_from_camera, target_world)
        pose, match = solve_pose(feats, markers, VisionConfig(), prior=prior)
        assert match.face_id == 0
        assert rotation_angle(pose.R, truth.R) < 1e-6
        np.testing.assert_allclose(pose.t, truth.t, atol=1e-6)

    def test_prior_from_estimate_is_exact_at_truth(self):
        mount = CameraMount(offset_m=(0.05, 0.0))
        target_world = target_module_pose(TargetConfig(x_m=2.0, y_m=1.5, psi_rad=0.2))
        cam = planar_pose3(1.8, 1.45, 0.15).compose(camera_in_body(mount))
        truth = cam.inverse().compose(target_world)
        prior = prior_from_estimate((1.8, 1.45), 0.15, camera_in_body(mount), target_world)
        np.testing.assert_allclose(prior.R, truth.R, atol=1e-12)
        np.testing.assert_allclose(prior.t, truth.t, atol=1e-12)

    def test_solve_pose_end_to_end(self, markers, intr):
        feats, truth = _features(markers, intr, 1)
        pose, match = solve_pose(feats, markers, VisionConfig(), prior=PoseCandidate(truth.R, truth.t))
        assert match.face_id == 1
        np.testing.assert_allclose(pose.t, truth.t, atol=1e-6)

    def test_roundtrip_suite(self):
        res = check_p3p_roundtrip(SelfCheckConfig(seed=3), n_trials=50)
        assert res.passed, res.detail


class TestVisionFilter:
    def test_feature_jacobian(self, markers):
        rng = np.random.default_rng(9)
        for _ in range(10):
            state = np.concatenate(
                [Rotation.random(random_state=rng).as_quat(), [0.02, -0.01, 0.4], rng.normal(scale=0.01, size=3)]
            )
            m = markers.face(0).points()[1]
            num = numerical_jacobian(lambda s: feature_model(s, m), state)
            assert jacobian_rel_error(feature_jacobian(state, m), num) < 1e-5

    def test_converges_on_static_target(self, markers, intr):
        vcfg = VisionConfig()
        feats, truth = _features(markers, intr, 0)
        vs = init_vision_state(PoseCandidate(truth.R, truth.t + np.array([0.003, -0.002, 0.004])), vcfg)
        noise = NoiseConfig(feature_sigma_px=0.5)
        for k in range(100):
            vs = vision_predict(vs, np.zeros(3), vcfg, 0.05)
            noisy, _ = _features(markers, intr, 0, noise=noise, seed=k)
            vs = vision_ekf_update(vs, correspondences_from_labels(noisy, markers), intr, vcfg)
            assert covariance_healthy(vs)
            np.testing.assert_allclose(np.linalg.norm(vs.q), 1.0)
        assert vs.converged
        assert np.linalg.norm(vs.x - truth.t) < 0.005

    def test_holds_convergence_at_docking_depth(self, markers, intr):
        vcfg = VisionConfig()
        feats, truth = _features(markers, intr, 0, distance=0.17)
        corr = correspondences_from_labels(feats, markers)
        vs = init_vision_state(PoseCandidate(truth.R, truth.t + np.array([0.002, -0.001, 0.002])), vcfg)
        for k in range(400):
            vs = vision_predict(vs, np.zeros(3), vcfg, 0.05)
            vs = vision_ekf_update(vs, corr, intr, vcfg)
            if k >= 20:
                assert vs.converged, f"lost convergence at frame {k}: 3sigma={vs.position_3sigma():.4g} m"
        assert covariance_healthy(vs)
        assert np.linalg.norm(vs.x - truth.t) < 1e-4

    def test_quaternion_covariance_stays_on_tangent(self, markers, intr):
        vcfg = VisionConfig()
        feats, truth = _features(markers, intr, 0, distance=0.25)
        vs = init_vision_state(PoseCandidate(truth.R, truth.t), vcfg)
        for _ in range(50):
            vs = vision_predict(vs, np.array([0.0, 0.05, 0.0]), vcfg, 0.05)
            vs = vision_ekf_update(vs, correspondences_from_labels(feats, markers), intr, vcfg)
            # no variance along q itself beyond the positive-definiteness floor
            assert float(vs.q @ vs.P[0:4, 0:4] @ vs.q) < 1e-10
            assert covariance_healthy(vs)

    def test_predict_rotates_with_camera(self, markers, intr):
        vcfg = VisionConfig()
        _, truth = _features(markers, intr, 0)
        vs = init_vision_state(PoseCandidate(truth.R, truth.t), vcfg)
        w = np.array([0.0, 0.2, 0.0])
        out = vs
        for _ in range(10):
            out = vision_predict(out, w, vcfg, 0.01)
        R_d = Rotation.from_rotvec(-w * 0.1).as_matrix()
        np.testing.assert_allclose(out.x, R_d @ truth.t, atol=1e-12)
        assert rotation_angle(out.as_candidate().R, R_d @ truth.R) < 1e-9
        assert out.stamp == pytest.approx(0.1)

    def test_predict_rejects_nonpositive_dt(self, markers, intr):
        _, truth = _features(markers, intr, 0)
        vs = init_vision_state(PoseCandidate(truth.R, truth.t), VisionConfig())
        with pytest.raises(ValueError):
            vision_predict(vs, np.zeros(3), VisionConfig(), 0.0)

    def test_camera_rate_for_forward_camera(self):
        np.testing.assert_allclose(camera_rate(0.5, CameraMount()), [0.0, -0.5, 0.0], atol=1e-15)


class TestPlanarOutput:
    def _state(self, chaser, mount, target_world, converged=True):
        cam_world = planar_pose3(*chaser).compose(camera_in_body(mount))
        cam_from_target = cam_world.inverse().compose(target_world)
        q = Rotation.from_matrix(cam_from_target.R).as_quat()
        return VisionState(q, cam_from_target.t, np.zeros(3), np.eye(10) * 1e-8, converged=converged)

    def test_recovers_chaser_pose(self):
        mount = CameraMount(offset_m=(0.05, 0.0))
        target_world = target_module_pose(TargetConfig(x_m=2.0, y_m=1.5, psi_rad=0.0))
        chaser = (1.82, 1.51, 0.04)
        pose = planar_pose_output(self._state(chaser, mount, target_world), mount, target_world)
        assert (pose.x, pose.y) == pytest.approx(chaser[:2], abs=1e-9)
        assert pose.psi == pytest.approx(chaser[2], abs=1e-9)
        assert np.all(np.diag(pose.cov) >= np.array([0.001, 0.001, 0.00225]))

    def test_heading_near_wrap(self):
        mount = CameraMount()
        target_world = target_module_pose(TargetConfig(x_m=1.0, y_m=1.5, psi_rad=math.pi))
        chaser = (1.2, 1.5, math.pi - 1e-4)
        pose = planar_pose_output(self._state(chaser, mount, target_world), mount, target_world, cov_floor=(0.0, 0.0, 0.0))
        assert abs(math.remainder(pose.psi - chaser[2], 2 * math.pi)) < 1e-9
        assert pose.cov[2, 2] < 1e-4

    def test_quarter_turn_mount_shifts_heading(self):
        target_world = target_module_pose(TargetConfig(x_m=2.0, y_m=1.5, psi_rad=0.0))
        vs = self._state((1.8, 1.5, 0.1), CameraMount(), target_world)
        forward = planar_pose_output(vs, CameraMount(), target_world)
        side = planar_pose_output(vs, CameraMount(yaw_rad=math.pi / 2), target_world)
        assert wrap_angle(forward.psi - side.psi) == pytest.approx(math.pi / 2, abs=1e-9)
        assert (side.x, side.y) == pytest.approx((forward.x, forward.y), abs=1e-9)

    def test_not_converged(self):
        mount = CameraMount()
        target_world = target_module_pose(TargetConfig())
        vs = self._state((1.8, 1.5, 0.0), mount, target_world, converged=False)
        with pytest.raises(NotConvergedError):
            planar_pose_output(vs, mount, target_world)
