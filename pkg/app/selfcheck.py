# app/selfcheck.py
"""Property suites run by ``selfcheck``: Jacobians against central differences, P3P round trips,
gate calibration on clean range streams, chi-square gate constants and covariance health."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
from scipy.spatial.transform import Rotation
from scipy.stats import chi2

from geometry import is_spd, jacobian_rel_error, numerical_jacobian, quat_to_rot, rotation_angle
from models import (
    AnchorSet,
    BodyState,
    CameraIntrinsics,
    FilterConfig,
    MarkerSet,
    ModuleParams,
    NoiseConfig,
    Pose3,
    RangeMeasurement,
    ThrusterCommand,
    VisionConfig,
)
from onboard.estimator import (
    CovarianceError,
    EstimatorState,
    accel_jacobian,
    predict,
    predicted_accel,
    predicted_range,
    propagate_mean,
    range_jacobian,
    transition_matrix,
    update_range,
)
from onboard.vision import (
    Correspondence,
    PoseCandidate,
    VisionError,
    covariance_healthy,
    correspondences_from_labels,
    disambiguate,
    feature_jacobian,
    feature_model,
    init_vision_state,
    p3p_solve,
    vision_ekf_update,
    vision_predict,
)
from world.sensors import project_features, project_point, sample_uwb

logger = logging.getLogger(__name__)


@dataclass
class SelfCheckConfig:
    seed: int = 0
    n_states: int = 100
    jacobian_tol: float = 1e-5
    n_p3p: int = 1000
    p3p_translation_tol_m: float = 1e-6
    p3p_rotation_tol_rad: float = 1e-6
    orthonormal_tol: float = 1e-9
    n_range_updates: int = 10_000
    gate_rate_max: float = 1e-3
    gate_confidence: float = 0.9999
    gate_constant_tol: float = 0.01
    n_vision_steps: int = 200


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    detail: Dict[str, Any] = field(default_factory=dict)
    elapsed_s: float = 0.0


@dataclass
class SelfCheckReport:
    results: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failed(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def as_dict(self) -> Dict[str, Any]:
        return {"passed": self.passed, "checks": [asdict(r) for r in self.results]}


# --------------------
# Random inputs
# --------------------
def _random_zeta(rng: np.random.Generator) -> np.ndarray:
    return np.concatenate([rng.uniform(0.0, 3.0, 2), rng.uniform(-0.3, 0.3, 2)])


def _random_vision_state(rng: np.random.Generator) -> np.ndarray:
    q = Rotation.random(random_state=rng).as_quat()
    x = np.array([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.3, 2.0)])
    return np.concatenate([q, x, rng.uniform(-0.05, 0.05, 3)])


def _facing_pose(
    rng: np.random.Generator,
    normal: np.ndarray,
    centroid: np.ndarray,
    max_tilt_rad: float,
    depth_m: Tuple[float, float] = (0.3, 2.0),
) -> Pose3:
    """Camera-from-target pose with the given face turned towards the camera."""
    n = normal / np.linalg.norm(normal)
    helper = np.array([0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, n)
    e1 = e1 / np.linalg.norm(e1)
    # rows map the face normal onto -z
    base = Rotation.from_matrix(np.vstack([e1, np.cross(-n, e1), -n]))
    spin = Rotation.from_rotvec([0.0, 0.0, rng.uniform(-math.pi, math.pi)])
    axis = np.array([*rng.normal(size=2), 0.0])
    tilt = Rotation.from_rotvec(axis / np.linalg.norm(axis) * rng.uniform(0.0, max_tilt_rad))
    R = (tilt * spin * base).as_matrix()
    depth = rng.uniform(*depth_m)
    ray = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), 1.0])
    return Pose3(R, depth * ray - R @ centroid)


def _timed(name: str, limit: float, fn: Callable[[], CheckResult]) -> CheckResult:
    t0 = time.perf_counter()
    res = fn()
    res.elapsed_s = time.perf_counter() - t0
    logger.info("%s: %s (value=%.3g, limit=%.3g)", name, "ok" if res.passed else "FAILED", res.value, limit)
    return res


# --------------------
# Jacobian suites
# --------------------
def check_transition_jacobian(cfg: SelfCheckConfig, params: Optional[ModuleParams] = None) -> CheckResult:
    params = params or ModuleParams()
    rng = np.random.default_rng([cfg.seed, 1])
    worst = 0.0
    for _ in range(cfg.n_states):
        zeta = _random_zeta(rng)
        psi = rng.uniform(-math.pi, math.pi)
        omega = rng.uniform(-1.0, 1.0)
        dt = rng.uniform(1e-3, 5e-2)
        force = rng.uniform(-0.2, 0.2, 2)
        num = numerical_jacobian(lambda z: propagate_mean(z, force, psi, omega, params, dt), zeta)
        worst = max(worst, jacobian_rel_error(transition_matrix(psi, omega, params, dt), num))
    return CheckResult("jacobian_transition", worst < cfg.jacobian_tol, worst, cfg.jacobian_tol)


def check_accel_jacobian(cfg: SelfCheckConfig, params: Optional[ModuleParams] = None) -> CheckResult:
    params = params or ModuleParams()
    rng = np.random.default_rng([cfg.seed, 2])
    H = accel_jacobian(params)
    worst = 0.0
    for _ in range(cfg.n_states):
        zeta = _random_zeta(rng)
        force = rng.uniform(-0.2, 0.2, 2)
        num = numerical_jacobian(lambda z: predicted_accel(z, force, params), zeta)
        worst = max(worst, jacobian_rel_error(H, num))
    return CheckResult("jacobian_accel", worst < cfg.jacobian_tol, worst, cfg.jacobian_tol)


def check_range_jacobian(cfg: SelfCheckConfig, anchors: Optional[AnchorSet] = None) -> CheckResult:
    anchors = anchors or AnchorSet()
    rng = np.random.default_rng([cfg.seed, 3])
    worst = 0.0
    for _ in range(cfg.n_states):
        zeta = _random_zeta(rng)
        psi = rng.uniform(-math.pi, math.pi)
        offset = rng.uniform(-0.05, 0.05, 2)
        for a in anchors.as_array():
            if np.linalg.norm(zeta[:2] - a) < 0.2:
                continue
            H = range_jacobian(zeta, a, offset, psi)
            num = numerical_jacobian(lambda z: np.array([predicted_range(z, a, offset, psi)[0]]), zeta)
            worst = max(worst, jacobian_rel_error(H, num))
    return CheckResult("jacobian_range", worst < cfg.jacobian_tol, worst, cfg.jacobian_tol)


def check_feature_jacobian(cfg: SelfCheckConfig, markers: Optional[MarkerSet] = None) -> CheckResult:
    markers = markers or MarkerSet()
    rng = np.random.default_rng([cfg.seed, 4])
    pts = np.vstack([f.points() for f in markers.faces])
    worst = 0.0
    for _ in range(cfg.n_states):
        state = _random_vision_state(rng)
        m = pts[rng.integers(len(pts))]
        num = numerical_jacobian(lambda s: feature_model(s, m), state)
        worst = max(worst, jacobian_rel_error(feature_jacobian(state, m), num))
    return CheckResult("jacobian_feature", worst < cfg.jacobian_tol, worst, cfg.jacobian_tol)


# --------------------
# P3P
# --------------------
def check_p3p_roundtrip(
    cfg: SelfCheckConfig,
    markers: Optional[MarkerSet] = None,
    intr: Optional[CameraIntrinsics] = None,
    n_trials: Optional[int] = None,
) -> CheckResult:
    """Noiseless projections of random face-on poses, solved and disambiguated with a 4th marker."""
    markers = markers or MarkerSet()
    intr = intr or CameraIntrinsics()
    noise = NoiseConfig.noiseless()
    rng = np.random.default_rng([cfg.seed, 5])
    n = cfg.n_p3p if n_trials is None else n_trials
    camera = Pose3(np.eye(3), np.zeros(3))
    worst_t = worst_r = worst_orth = 0.0
    failures = 0
    n_candidates = 0
    for _ in range(n):
        k = int(rng.integers(len(markers.faces)))
        face = markers.faces[k]
        pts = face.points()
        truth = _facing_pose(rng, np.asarray(face.normal, dtype=float), pts.mean(axis=0), math.radians(60.0))
        feats = project_features(camera, truth, markers, intr, noise, rng, faces=[face.face_id])
        corr = correspondences_from_labels(feats, markers)
        if len(corr) != 3:
            failures += 1
            continue
        other = markers.faces[(k + 2) % len(markers.faces)]
        fourth_uv = project_point(truth.apply(other.points()[1]))
        fourth = Correspondence(other.points()[1], *fourth_uv) if fourth_uv is not None else None
        try:
            cands = p3p_solve(corr)
            best = disambiguate(cands, corr, fourth_point=fourth)
        except VisionError as e:
            logger.debug("p3p round trip failed: %s", e)
            failures += 1
            continue
        n_candidates += len(cands)
        for c in cands:
            worst_orth = max(worst_orth, float(np.max(np.abs(c.R.T @ c.R - np.eye(3)))))
        worst_t = max(worst_t, float(np.linalg.norm(best.t - truth.t)))
        worst_r = max(worst_r, rotation_angle(best.R, truth.R))
    passed = (
        failures == 0
        and worst_t < cfg.p3p_translation_tol_m
        and worst_r < cfg.p3p_rotation_tol_rad
        and worst_orth < cfg.orthonormal_tol
    )
    return CheckResult(
        "p3p_roundtrip",
        passed,
        worst_t,
        cfg.p3p_translation_tol_m,
        {
            "trials": n,
            "failures": failures,
            "max_rotation_err_rad": worst_r,
            "max_orthonormal_err": worst_orth,
            "mean_candidates": n_candidates / max(1, n - failures),
        },
    )


# --------------------
# Gating
# --------------------
def check_gate_constants(cfg: SelfCheckConfig, fcfg: Optional[FilterConfig] = None) -> CheckResult:
    fcfg = fcfg or FilterConfig()
    expected_range = float(chi2.ppf(cfg.gate_confidence, 1))
    expected_vector = float(chi2.ppf(cfg.gate_confidence, 2))
    err = max(abs(fcfg.gate_range - expected_range), abs(fcfg.gate_vector - expected_vector))
    return CheckResult(
        "gate_constants",
        err < cfg.gate_constant_tol,
        err,
        cfg.gate_constant_tol,
        {"chi2_1dof": expected_range, "chi2_2dof": expected_vector},
    )


def check_gate_calibration(cfg: SelfCheckConfig) -> CheckResult:
    """Stationary module, ranges drawn with the filter's own sigma and no outliers.

    Each accepted or rejected update is one scalar range; the empirical rejection rate must stay
    near the gate's nominal tail probability.
    """
    params = ModuleParams()
    anchors = AnchorSet()
    fcfg = FilterConfig()
    noise = NoiseConfig(uwb_inlier_sigma_m=fcfg.uwb_sigma_m, uwb_outlier_prob=0.0)
    rng = np.random.default_rng([cfg.seed, 6])
    truth = BodyState(1.2, 1.7, 0.0)
    est = EstimatorState(zeta=np.array([truth.x, truth.y, 0.0, 0.0]), P=np.diag(fcfg.initial_cov_diag))
    idle = ThrusterCommand.zero(params.n_nozzles)
    dt = 0.02
    processed = rejected = spd_violations = 0
    t = 0.0
    while processed < cfg.n_range_updates:
        t += dt
        est = predict(est, idle, 0.0, 0.0, params, fcfg, dt)
        for m in sample_uwb(truth, anchors, None, noise, rng, stamp=t):
            est, outcome = update_range(est, m, anchors.as_array()[m.anchor_id], anchors.antenna_offset_m, 0.0, fcfg)
            processed += 1
            rejected += int(not outcome.accepted)
            spd_violations += int(not is_spd(est.P))
    rate = rejected / processed
    return CheckResult(
        "gate_calibration",
        rate <= cfg.gate_rate_max and spd_violations == 0,
        rate,
        cfg.gate_rate_max,
        {"processed": processed, "rejected": rejected, "nominal_rate": 1.0 - cfg.gate_confidence, "spd_violations": spd_violations},
    )


# --------------------
# Covariance health
# --------------------
def check_vision_covariance(
    cfg: SelfCheckConfig,
    markers: Optional[MarkerSet] = None,
    intr: Optional[CameraIntrinsics] = None,
    vcfg: Optional[VisionConfig] = None,
) -> CheckResult:
    """Vision filter run on noisy features of a slowly turning camera; P_v must stay SPD throughout."""
    markers = markers or MarkerSet()
    intr = intr or CameraIntrinsics()
    vcfg = vcfg or VisionConfig()
    noise = NoiseConfig()
    rng = np.random.default_rng([cfg.seed, 7])
    face = markers.faces[0]
    truth = _facing_pose(rng, np.asarray(face.normal, dtype=float), face.points().mean(axis=0), math.radians(20.0), (0.2, 0.4))
    dt = 0.05
    omega_cam = np.array([0.0, 0.02, 0.0])
    vs = init_vision_state(PoseCandidate(truth.R, truth.t + 0.002), vcfg, face_id=face.face_id)
    camera = Pose3(np.eye(3), np.zeros(3))
    violations = 0
    for _ in range(cfg.n_vision_steps):
        R_d = Rotation.from_rotvec(-omega_cam * dt).as_matrix()
        truth = Pose3(R_d @ truth.R, R_d @ truth.t)
        vs = vision_predict(vs, omega_cam, vcfg, dt)
        violations += int(not covariance_healthy(vs))
        feats = project_features(camera, truth, markers, intr, noise, rng, faces=[face.face_id])
        vs = vision_ekf_update(vs, correspondences_from_labels(feats, markers), intr, vcfg)
        violations += int(not covariance_healthy(vs))
    pos_err = float(np.linalg.norm(vs.x - truth.t))
    att_err = rotation_angle(quat_to_rot(vs.q), truth.R)
    return CheckResult(
        "vision_covariance",
        violations == 0 and vs.converged,
        float(violations),
        0.0,
        {"steps": cfg.n_vision_steps, "converged": vs.converged, "position_err_m": pos_err, "attitude_err_rad": att_err},
    )


def check_estimator_covariance(cfg: SelfCheckConfig) -> CheckResult:
    """Random predict/update sequences from random SPD starting covariances."""
    params = ModuleParams()
    anchors = AnchorSet()
    fcfg = FilterConfig()
    rng = np.random.default_rng([cfg.seed, 8])
    violations = 0
    steps = 0
    for _ in range(cfg.n_states):
        A = rng.normal(scale=0.1, size=(4, 4))
        est = EstimatorState(zeta=_random_zeta(rng), P=A @ A.T + 1e-4 * np.eye(4))
        cmd = ThrusterCommand(duties=tuple(float(d) for d in rng.uniform(0.0, 1.0, params.n_nozzles)))
        for k in range(20):
            psi = rng.uniform(-math.pi, math.pi)
            try:
                est = predict(est, cmd, rng.uniform(-0.5, 0.5), psi, params, fcfg, 0.01)
                i = k % len(anchors.positions_m)
                r, _ = predicted_range(est.zeta, anchors.as_array()[i], np.zeros(2), psi)
                meas = RangeMeasurement(i, r + fcfg.uwb_sigma_m * rng.standard_normal(), 0.01 * k)
                est, _ = update_range(est, meas, anchors.as_array()[i], np.zeros(2), psi, fcfg)
            except CovarianceError:
                violations += 1
                break
            steps += 1
            violations += int(not is_spd(est.P))
    return CheckResult("estimator_covariance", violations == 0, float(violations), 0.0, {"steps": steps})


# --------------------
# Entry point
# --------------------
def run_self_check(cfg: Optional[SelfCheckConfig] = None) -> SelfCheckReport:
    cfg = cfg or SelfCheckConfig()
    suites = [
        ("jacobian_transition", cfg.jacobian_tol, lambda: check_transition_jacobian(cfg)),
        ("jacobian_accel", cfg.jacobian_tol, lambda: check_accel_jacobian(cfg)),
        ("jacobian_range", cfg.jacobian_tol, lambda: check_range_jacobian(cfg)),
        ("jacobian_feature", cfg.jacobian_tol, lambda: check_feature_jacobian(cfg)),
        ("p3p_roundtrip", cfg.p3p_translation_tol_m, lambda: check_p3p_roundtrip(cfg)),
        ("gate_constants", cfg.gate_constant_tol, lambda: check_gate_constants(cfg)),
        ("gate_calibration", cfg.gate_rate_max, lambda: check_gate_calibration(cfg)),
        ("estimator_covariance", 0.0, lambda: check_estimator_covariance(cfg)),
        ("vision_covariance", 0.0, lambda: check_vision_covariance(cfg)),
    ]
    results = [_timed(name, limit, fn) for name, limit, fn in suites]
    report = SelfCheckReport(results)
    if not report.passed:
        logger.error("self-check failed: %s", ", ".join(r.name for r in report.failed()))
    return report
