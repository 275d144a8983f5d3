# onboard/vision.py
"""Monocular relative pose from LED marker features.

Pipeline: identify the face from a feature triple, solve P3P for up to four camera-from-target
poses, disambiguate, then refine with a feature-level EKF over (q, x, rho). The EKF state is the
pose of the target module in the camera frame; ``q`` is scalar-last.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.polynomial import Polynomial
from scipy.linalg import cho_factor, cho_solve
from scipy.spatial.transform import Rotation

from geometry import (
    camera_in_body,
    is_spd,
    numerical_jacobian,
    planar_pose3,
    quat_left_matrix,
    quat_rot_partials,
    quat_to_rot,
    rotation_angle,
    symmetrize,
    wrap_angle,
)
from models import (
    CameraIntrinsics,
    CameraMount,
    FeatureObservation,
    MarkerFace,
    MarkerSet,
    PlanarPose,
    Pose3,
    VisionConfig,
)

logger = logging.getLogger(__name__)


class VisionError(Exception):
    pass


class NoFaceError(VisionError):
    pass


class AmbiguousFaceError(VisionError):
    pass


class DegenerateGeometryError(VisionError):
    pass


class NoSolutionError(VisionError):
    pass


class NoValidPoseError(VisionError):
    pass


class NotConvergedError(VisionError):
    pass


@dataclass(frozen=True)
class Correspondence:
    marker: np.ndarray  # target-frame position
    u: float  # rectified
    v: float
    marker_index: int = -1

    @property
    def bearing(self) -> np.ndarray:
        f = np.array([self.u, self.v, 1.0])
        return f / np.linalg.norm(f)


@dataclass(frozen=True)
class FaceMatch:
    face_id: int
    correspondences: List[Correspondence]
    score: float
    used: Tuple[int, int, int]  # indices into the feature list


@dataclass(frozen=True)
class PoseCandidate:
    R: np.ndarray  # camera-from-target
    t: np.ndarray
    residual: float = 0.0

    def transform(self, p: np.ndarray) -> np.ndarray:
        return self.R @ p + self.t

    def reprojection_error(self, c: Correspondence) -> float:
        p = self.transform(c.marker)
        if p[2] <= 0.0:
            return math.inf
        return math.hypot(p[0] / p[2] - c.u, p[1] / p[2] - c.v)

    def depths_positive(self, corr: Sequence[Correspondence]) -> bool:
        return all(self.transform(c.marker)[2] > 0.0 for c in corr)


# --------------------
# Face identification
# --------------------
def _roles(points: np.ndarray) -> Tuple[Tuple[int, int, int], np.ndarray]:
    """Vertex order (shared by shortest+middle edge, other end of shortest, remaining) and sorted edges."""
    edges = {
        (a, b): float(np.linalg.norm(points[a] - points[b])) for a, b in ((0, 1), (0, 2), (1, 2))
    }
    short, mid, _ = sorted(edges, key=edges.get)
    (shared,) = set(short) & set(mid)
    (other,) = set(short) - {shared}
    (rest,) = {0, 1, 2} - {shared, other}
    return (shared, other, rest), np.array(sorted(edges.values()))


def _signature(sorted_edges: np.ndarray) -> np.ndarray:
    return sorted_edges[:2] / sorted_edges[2]


def _ranks_separated(sorted_edges: np.ndarray, tolerance: float) -> bool:
    gaps = np.diff(sorted_edges) / sorted_edges[2]
    return bool(np.all(gaps > tolerance))


def _match_triple(
    features: Sequence[FeatureObservation], triple: Tuple[int, int, int], markers: MarkerSet, tolerance: float
) -> Optional[FaceMatch]:
    uv = np.array([[features[i].u, features[i].v] for i in triple])
    roles, edges = _roles(uv)
    if edges[2] <= 0.0:
        return None
    sig = _signature(edges)
    hits = []
    for face in markers.faces:
        score = float(np.max(np.abs(sig - face.signature())))
        if score <= tolerance:
            hits.append((score, face))
    if not hits:
        return None
    if len(hits) > 1 or not _ranks_separated(edges, tolerance):
        raise AmbiguousFaceError(f"feature triple {triple} matches {[f.face_id for _, f in hits]}")
    score, face = hits[0]
    face_roles, _ = _roles(face.points())
    pts = face.points()
    corr = [
        Correspondence(pts[face_roles[r]], features[triple[roles[r]]].u, features[triple[roles[r]]].v, face_roles[r])
        for r in range(3)
    ]
    corr.sort(key=lambda c: c.marker_index)
    return FaceMatch(face.face_id, corr, score, triple)


def identify_face(
    features: Sequence[FeatureObservation], markers: MarkerSet, tolerance: float = 0.05
) -> FaceMatch:
    """Match a feature triple to the face whose edge-ratio signature it reproduces.

    With more than three features every triple is tried and the closest match wins; the result does
    not depend on input order.
    """
    if len(features) < 3:
        raise NoFaceError(f"need at least 3 features, got {len(features)}")
    # canonical order so the result is independent of the caller's ordering
    order = sorted(range(len(features)), key=lambda i: (features[i].u, features[i].v))
    ordered = [features[i] for i in order]
    best: Optional[FaceMatch] = None
    ambiguous: Optional[AmbiguousFaceError] = None
    for triple in combinations(range(len(ordered)), 3):
        try:
            m = _match_triple(ordered, triple, markers, tolerance)
        except AmbiguousFaceError as e:
            ambiguous = ambiguous or e
            continue
        if m is not None and (best is None or (m.score, m.face_id) < (best.score, best.face_id)):
            best = m
    if best is None:
        if ambiguous is not None:
            raise ambiguous
        raise NoFaceError("no face signature within tolerance")
    return replace(best, used=tuple(sorted(order[i] for i in best.used)))


# --------------------
# P3P
# --------------------
def _frame_rows(e1: np.ndarray, other: np.ndarray) -> np.ndarray:
    e3 = np.cross(e1, other)
    e3 = e3 / np.linalg.norm(e3)
    return np.vstack([e1, np.cross(e3, e1), e3])


def _polish(poly: Polynomial, x: float, iters: int = 3) -> float:
    d = poly.deriv()
    for _ in range(iters):
        slope = d(x)
        if slope == 0.0:
            break
        x -= poly(x) / slope
    return x


def reprojection_residual(cand: PoseCandidate, corr: Sequence[Correspondence]) -> float:
    errs = [cand.reprojection_error(c) for c in corr]
    return float(math.sqrt(sum(e * e for e in errs) / len(errs)))


def p3p_solve(correspondences: Sequence[Correspondence], residual_tol: float = 1e-4) -> List[PoseCandidate]:
    """All camera-from-target poses consistent with three marker/bearing pairs.

    Intermediate frames are built on the bearing pair (camera side) and the marker pair (target
    side); the remaining freedom reduces to a quartic in the cosine of the rotation about the
    marker baseline. Squaring introduces spurious roots, removed by the reprojection check.
    """
    if len(correspondences) != 3:
        raise ValueError("p3p_solve takes exactly 3 correspondences")
    c1, c2, c3 = correspondences
    P1, P2, P3 = (np.asarray(c.marker, dtype=float) for c in (c1, c2, c3))
    if np.linalg.norm(np.cross(P2 - P1, P3 - P1)) < 1e-12:
        raise DegenerateGeometryError("markers are collinear")
    f1, f2, f3 = c1.bearing, c2.bearing, c3.bearing
    if np.linalg.norm(np.cross(f1, f2)) < 1e-12:
        raise DegenerateGeometryError("feature bearings are parallel")

    T = _frame_rows(f1, f2)
    f3t = T @ f3
    if f3t[2] > 0.0:
        P1, P2, f1, f2 = P2, P1, f2, f1
        T = _frame_rows(f1, f2)
        f3t = T @ f3
    if abs(f3t[2]) < 1e-12:
        raise NoSolutionError("camera centre lies in the marker plane")

    N = _frame_rows((P2 - P1) / np.linalg.norm(P2 - P1), P3 - P1)
    p1, p2, _ = N @ (P3 - P1)
    d12 = float(np.linalg.norm(P2 - P1))
    phi1 = f3t[0] / f3t[2]
    phi2 = f3t[1] / f3t[2]
    cos_b = float(f1 @ f2)
    b = cos_b / math.sqrt(1.0 - cos_b * cos_b)

    c = Polynomial([0.0, 1.0])
    num = Polynomial([phi1 * p1 - phi2 * d12 * b, phi2 * p2])
    den = Polynomial([phi2 * d12 - phi2 * p1, phi1 * p2])
    quartic = (p1 * den - num * c * p2) ** 2 - phi2 ** 2 * p2 ** 2 * (1.0 - c ** 2) * (den ** 2 + num ** 2)
    quartic = quartic.trim(tol=1e-300)
    if quartic.degree() < 1:
        raise NoSolutionError("P3P polynomial is constant")

    candidates: List[PoseCandidate] = []
    for root in quartic.roots():
        if abs(root.imag) > 1e-6 * max(1.0, abs(root.real)):
            continue
        cos_t = min(1.0, max(-1.0, _polish(quartic, float(root.real))))
        sin_t = math.sqrt(max(0.0, 1.0 - cos_t * cos_t))
        dv = den(cos_t)
        if dv == 0.0:
            continue
        k = num(cos_t) / dv
        sa = 1.0 / math.sqrt(1.0 + k * k)
        ca = k * sa
        scale = d12 * (sa * b + ca)
        c_eta = scale * np.array([ca, sa * cos_t, sa * sin_t])
        Q = np.array(
            [
                [-ca, -sa * cos_t, -sa * sin_t],
                [sa, -ca * cos_t, -ca * sin_t],
                [0.0, -sin_t, cos_t],
            ]
        )
        centre = P1 + N.T @ c_eta
        R = T.T @ Q @ N
        cand = PoseCandidate(R, -R @ centre)
        if not cand.depths_positive(correspondences):
            continue
        res = reprojection_residual(cand, correspondences)
        if res > residual_tol:
            continue
        candidates.append(replace(cand, residual=res))
    if not candidates:
        raise NoSolutionError("no real P3P root reprojects the features")
    return candidates


def disambiguate(
    candidates: Sequence[PoseCandidate],
    correspondences: Sequence[Correspondence] = (),
    prior: Optional[PoseCandidate] = None,
    fourth_point: Optional[Correspondence] = None,
    translation_weight: float = 1.0,
    max_prior_angle: Optional[float] = None,
) -> PoseCandidate:
    """Pick one pose: 4th-feature residual, else closeness to the prior, else the 3-point residual.

    With ``max_prior_angle`` set, candidates rotated further than that from the prior are discarded
    before any selection.
    """
    if not candidates:
        raise ValueError("disambiguate needs at least one candidate")
    valid = [c for c in candidates if c.depths_positive(correspondences)]
    if not valid:
        raise NoValidPoseError("every candidate puts a marker behind the camera")
    if prior is not None and max_prior_angle is not None:
        valid = [c for c in valid if rotation_angle(c.R, prior.R) <= max_prior_angle]
        if not valid:
            raise NoValidPoseError(f"no candidate within {max_prior_angle:.3f} rad of the prior attitude")
    if len(valid) == 1:
        return valid[0]
    if fourth_point is not None:
        return min(valid, key=lambda c: c.reprojection_error(fourth_point))
    if prior is not None:
        return min(
            valid,
            key=lambda c: rotation_angle(c.R, prior.R) + translation_weight * float(np.linalg.norm(c.t - prior.t)),
        )
    return min(valid, key=lambda c: c.residual)


def prior_from_estimate(
    position: Sequence[float], psi: float, body_from_camera: Pose3, target_in_world: Pose3
) -> PoseCandidate:
    """Camera-from-target pose implied by the navigation estimate; used to pick among P3P roots."""
    cam_world = planar_pose3(float(position[0]), float(position[1]), psi).compose(body_from_camera)
    rel = cam_world.inverse().compose(target_in_world)
    return PoseCandidate(rel.R, rel.t)


def solve_pose(
    features: Sequence[FeatureObservation],
    markers: MarkerSet,
    cfg: VisionConfig,
    prior: Optional[PoseCandidate] = None,
) -> Tuple[PoseCandidate, FaceMatch]:
    """Identify, solve and disambiguate in one call; a second visible face supplies the 4th point."""
    match = identify_face(features, markers, cfg.face_tolerance)
    fourth = None
    rest = [f for i, f in enumerate(features) if i not in match.used]
    if len(rest) >= 3:
        try:
            fourth = identify_face(rest, markers, cfg.face_tolerance).correspondences[0]
        except VisionError:
            fourth = None
    cands = p3p_solve(match.correspondences, cfg.p3p_residual_tol)
    pose = disambiguate(
        cands,
        match.correspondences,
        prior,
        fourth,
        cfg.prior_translation_weight,
        cfg.prior_max_angle_rad,
    )
    return pose, match


def correspondences_from_labels(features: Sequence[FeatureObservation], markers: MarkerSet) -> List[Correspondence]:
    """Correspondences from simulator marker labels; used by round-trip checks only."""
    out = []
    for f in features:
        if f.marker_id is None:
            continue
        face: MarkerFace = markers.face(f.marker_id[0])
        out.append(Correspondence(face.points()[f.marker_id[1]], f.u, f.v, f.marker_id[1]))
    return out


# --------------------
# Feature-level EKF
# --------------------
@dataclass(frozen=True)
class VisionState:
    q: np.ndarray  # camera-from-target, scalar-last
    x: np.ndarray  # target origin in the camera frame
    rho: np.ndarray
    P: np.ndarray  # 10x10 over (q, x, rho)
    converged: bool = False
    stamp: float = 0.0
    face_id: int = -1

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.q, self.x, self.rho])

    def as_candidate(self) -> PoseCandidate:
        return PoseCandidate(quat_to_rot(self.q), self.x.copy())

    def position_3sigma(self) -> float:
        return 3.0 * math.sqrt(max(0.0, float(np.max(np.linalg.eigvalsh(self.P[4:7, 4:7])))))


def init_vision_state(pose: PoseCandidate, cfg: VisionConfig, stamp: float = 0.0, face_id: int = -1) -> VisionState:
    q = Rotation.from_matrix(pose.R).as_quat()
    P = np.diag([cfg.init_att_var] * 4 + [cfg.init_pos_var] * 3 + [cfg.init_vel_var] * 3)
    return VisionState(
        q=q, x=np.asarray(pose.t, dtype=float).copy(), rho=np.zeros(3), P=project_tangent(P, q), stamp=stamp, face_id=face_id
    )


# variance kept along q itself so P_v stays positive definite after projection
_RADIAL_VAR = 1e-12


def project_tangent(P: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Restrict the quaternion block of P_v to the tangent space of the unit sphere at q."""
    q = q / np.linalg.norm(q)
    Pi = np.eye(10)
    Pi[0:4, 0:4] -= np.outer(q, q)
    out = Pi @ P @ Pi.T
    out[0:4, 0:4] += _RADIAL_VAR * np.outer(q, q)
    return symmetrize(out)


def camera_rate(omega_body: float, mount: CameraMount) -> np.ndarray:
    return camera_in_body(mount).R.T @ np.array([0.0, 0.0, omega_body])


def vision_predict(vs: VisionState, omega_cam: np.ndarray, cfg: VisionConfig, dt: float) -> VisionState:
    """Rotate the relative pose by the camera's own rotation; constant relative velocity."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    delta = Rotation.from_rotvec(-np.asarray(omega_cam, dtype=float) * dt)
    R_d = delta.as_matrix()
    Lq = quat_left_matrix(delta.as_quat())
    q = Lq @ vs.q
    q = q / np.linalg.norm(q)
    x = R_d @ (vs.x + vs.rho * dt)
    rho = R_d @ vs.rho

    F = np.zeros((10, 10))
    F[0:4, 0:4] = Lq
    F[4:7, 4:7] = R_d
    F[4:7, 7:10] = R_d * dt
    F[7:10, 7:10] = R_d
    G = np.vstack([0.5 * dt * dt * R_d, dt * R_d])
    Q = np.zeros((10, 10))
    Q[0:4, 0:4] = cfg.att_process_var * dt * np.eye(4)
    Q[4:10, 4:10] = cfg.accel_process_var * (G @ G.T)
    P = project_tangent(F @ vs.P @ F.T + Q, q)
    return replace(vs, q=q, x=x, rho=rho, P=P, stamp=vs.stamp + dt)


def feature_model(state: np.ndarray, marker: np.ndarray) -> np.ndarray:
    """Rectified projection of a target-frame marker for the state vector (q, x, rho); q is normalized first."""
    q = state[0:4] / np.linalg.norm(state[0:4])
    p = quat_to_rot(q) @ marker + state[4:7]
    return np.array([p[0] / p[2], p[1] / p[2]])


def feature_jacobian(state: np.ndarray, marker: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(state[0:4])
    q = state[0:4] / norm
    p = quat_to_rot(q) @ marker + state[4:7]
    z = p[2]
    dproj = np.array([[1.0 / z, 0.0, -p[0] / (z * z)], [0.0, 1.0 / z, -p[1] / (z * z)]])
    dp = np.zeros((3, 10))
    # d(q/|q|)/dq = (I - q q^T) / |q|
    dp[:, 0:4] = np.einsum("kij,j->ik", quat_rot_partials(q), marker) @ ((np.eye(4) - np.outer(q, q)) / norm)
    dp[:, 4:7] = np.eye(3)
    return dproj @ dp


def vision_ekf_update(
    vs: VisionState,
    correspondences: Sequence[Correspondence],
    intr: CameraIntrinsics,
    cfg: VisionConfig,
) -> VisionState:
    """Sequential per-feature updates with Joseph-form covariance; q renormalized afterwards."""
    sigma = cfg.feature_sigma_px / math.sqrt(intr.fx_px * intr.fy_px)
    R = sigma * sigma * np.eye(2)
    state = vs.vector
    P = vs.P
    for c in correspondences:
        p = quat_to_rot(state[0:4] / np.linalg.norm(state[0:4])) @ c.marker + state[4:7]
        if p[2] <= 0.0:
            logger.debug("feature for marker %d predicted behind the camera; skipped", c.marker_index)
            continue
        H = feature_jacobian(state, c.marker)
        nu = np.array([c.u, c.v]) - feature_model(state, c.marker)
        S = H @ P @ H.T + R
        K = cho_solve(cho_factor(S, lower=True), H @ P).T
        IKH = np.eye(10) - K @ H
        P = symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
        state = state + K @ nu
    q = state[0:4] / np.linalg.norm(state[0:4])
    out = replace(vs, q=q, x=state[4:7], rho=state[7:10], P=project_tangent(P, q))
    return replace(out, converged=out.position_3sigma() < cfg.converge_3sigma_m)


def covariance_healthy(vs: VisionState) -> bool:
    return bool(np.all(np.isfinite(vs.P))) and is_spd(vs.P)


# --------------------
# Planar output
# --------------------
def _chaser_pose(state: np.ndarray, target_in_world: Pose3, body_from_camera: Pose3) -> np.ndarray:
    q = state[0:4] / np.linalg.norm(state[0:4])
    cam_from_target = Pose3(quat_to_rot(q), state[4:7])
    world_from_body = target_in_world.compose(cam_from_target.inverse()).compose(body_from_camera.inverse())
    R = world_from_body.R
    return np.array([world_from_body.t[0], world_from_body.t[1], math.atan2(R[1, 0], R[0, 0])])


def planar_pose_output(
    vs: VisionState,
    mount: CameraMount,
    target_in_world: Pose3,
    cov_floor: Sequence[float] = (0.001, 0.001, 0.00225),
) -> PlanarPose:
    """Chaser (x, y, psi) in the world plane from a converged vision state.

    Covariance is the projected P_v diagonal, never below the configured floor.
    """
    if not vs.converged:
        raise NotConvergedError("vision filter has not converged")
    body_from_camera = camera_in_body(mount)
    state = vs.vector
    out = _chaser_pose(state, target_in_world, body_from_camera)

    def relative(s: np.ndarray) -> np.ndarray:
        # heading differenced against the nominal so the Jacobian never sees the wrap
        p = _chaser_pose(s, target_in_world, body_from_camera)
        p[2] = wrap_angle(p[2] - out[2])
        return p

    J = numerical_jacobian(relative, state)
    var = np.diag(J @ vs.P @ J.T)
    cov = np.diag(np.maximum(np.asarray(cov_floor, dtype=float), var))
    return PlanarPose(float(out[0]), float(out[1]), float(out[2]), cov, vs.stamp)
