# onboard/estimator.py
"""Planar EKF over zeta = (x, rho): inertial position and body-frame velocity.

Attitude and turn rate are measured inputs (AHRS), never estimated. Range updates are processed one
anchor at a time so the 1-DOF gate applies to each; vector updates (accelerometer, vision position)
use the 2-DOF gate.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.optimize import least_squares

from geometry import is_spd, rot2, symmetrize, wrap_angle
from models import (
    AnchorSet,
    FilterConfig,
    ModuleParams,
    PlanarPose,
    RangeMeasurement,
    ThrusterCommand,
)
from world.dynamics import thruster_forces

logger = logging.getLogger(__name__)

_I2 = np.eye(2)
_Z2 = np.zeros((2, 2))


class CovarianceError(RuntimeError):
    """Filter covariance lost symmetry or positive definiteness."""


@dataclass(frozen=True)
class EstimatorState:
    zeta: np.ndarray  # (x, y, u, v)
    P: np.ndarray
    stamp: float = 0.0
    # per-anchor time of last accepted range, and remaining under-weighted updates
    last_range: Dict[int, float] = field(default_factory=dict)
    underweight_left: Dict[int, int] = field(default_factory=dict)
    accepted_ranges: int = 0
    # consecutive gated-out ranges over all anchors
    rejected_streak: int = 0

    @property
    def position(self) -> np.ndarray:
        return self.zeta[:2]

    @property
    def body_velocity(self) -> np.ndarray:
        return self.zeta[2:]

    @property
    def position_trace(self) -> float:
        return float(self.P[0, 0] + self.P[1, 1])


@dataclass(frozen=True)
class GateOutcome:
    accepted: bool
    d2: float
    degenerate: bool = False
    weight: float = 1.0
    # position covariance was reset after a run of rejections
    reset: bool = False

    def __bool__(self) -> bool:
        return self.accepted


# --------------------
# Gating
# --------------------
def mahalanobis_sq(innovation: np.ndarray, S: np.ndarray) -> float:
    nu = np.atleast_1d(np.asarray(innovation, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    try:
        c = cho_factor(S, lower=True, check_finite=False)
    except LinAlgError as e:
        raise CovarianceError("innovation covariance is not positive definite") from e
    return float(nu @ cho_solve(c, nu, check_finite=False))


def _check(P: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(P)) or not is_spd(P):
        raise CovarianceError(f"covariance not symmetric positive definite after {where}")
    return P


def _joseph_update(
    est: EstimatorState,
    innovation: np.ndarray,
    H: np.ndarray,
    R: np.ndarray,
    gate: Optional[float],
    where: str,
) -> Tuple[EstimatorState, GateOutcome]:
    P = est.P
    S = H @ P @ H.T + R
    d2 = mahalanobis_sq(innovation, S)
    if gate is not None and d2 > gate:
        return est, GateOutcome(False, d2)
    c = cho_factor(S, lower=True, check_finite=False)
    K = cho_solve(c, H @ P, check_finite=False).T
    IKH = np.eye(P.shape[0]) - K @ H
    P_new = symmetrize(IKH @ P @ IKH.T + K @ R @ K.T)
    zeta = est.zeta + K @ np.atleast_1d(innovation)
    return replace(est, zeta=zeta, P=_check(P_new, where)), GateOutcome(True, d2)


# --------------------
# Prediction
# --------------------
def _velocity_matrix(omega: float, params: ModuleParams) -> np.ndarray:
    # rho_dot = f/m + A rho; A carries friction and the -omega x rho transport term
    mug = params.friction_mu * params.gravity_mps2
    return np.array([[-mug, omega], [-omega, -mug]])


def transition_matrix(psi: float, omega: float, params: ModuleParams, dt: float) -> np.ndarray:
    A = _velocity_matrix(omega, params)
    F = np.eye(4)
    F[:2, 2:] = rot2(psi) @ (dt * _I2 + 0.5 * dt * dt * A)
    F[2:, 2:] = _I2 + dt * A
    return F


def propagate_mean(
    zeta: np.ndarray, force: np.ndarray, psi: float, omega: float, params: ModuleParams, dt: float
) -> np.ndarray:
    rho = zeta[2:]
    rho_dot = force / params.mass_kg + _velocity_matrix(omega, params) @ rho
    x = zeta[:2] + rot2(psi) @ (rho * dt + 0.5 * dt * dt * rho_dot)
    return np.concatenate([x, rho + dt * rho_dot])


def process_noise(psi: float, cfg: FilterConfig, dt: float) -> np.ndarray:
    G = np.vstack([0.5 * dt * dt * rot2(psi), dt * _I2])
    return G @ np.diag(cfg.process_accel_var) @ G.T


def predict(
    est: EstimatorState,
    cmd: ThrusterCommand,
    z_gyro: float,
    z_psi: float,
    params: ModuleParams,
    cfg: FilterConfig,
    dt: float,
) -> EstimatorState:
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    force = thruster_forces(cmd, params).force
    F = transition_matrix(z_psi, z_gyro, params, dt)
    zeta = propagate_mean(est.zeta, force, z_psi, z_gyro, params, dt)
    P = symmetrize(F @ est.P @ F.T + process_noise(z_psi, cfg, dt))
    return replace(est, zeta=zeta, P=_check(P, "predict"), stamp=est.stamp + dt)


# --------------------
# Updates
# --------------------
def accel_jacobian(params: ModuleParams) -> np.ndarray:
    mug = params.friction_mu * params.gravity_mps2
    return np.hstack([_Z2, -mug * _I2])


def predicted_accel(zeta: np.ndarray, force: np.ndarray, params: ModuleParams) -> np.ndarray:
    mug = params.friction_mu * params.gravity_mps2
    return force / params.mass_kg - mug * zeta[2:]


def update_accel(
    est: EstimatorState,
    z_acc: np.ndarray,
    cmd: ThrusterCommand,
    params: ModuleParams,
    cfg: FilterConfig,
) -> Tuple[EstimatorState, GateOutcome]:
    """Specific-force update; the friction term makes body velocity observable."""
    force = thruster_forces(cmd, params).force
    nu = np.asarray(z_acc, dtype=float) - predicted_accel(est.zeta, force, params)
    R = cfg.accel_sigma_mps2 ** 2 * _I2
    gate = cfg.gate_vector if cfg.gating_enabled else None
    return _joseph_update(est, nu, accel_jacobian(params), R, gate, "accel update")


def predicted_range(
    zeta: np.ndarray, anchor_pos: np.ndarray, antenna_offset: np.ndarray, z_psi: float
) -> Tuple[float, np.ndarray]:
    """Range to the anchor and its line-of-sight unit vector from the anchor."""
    d = zeta[:2] + rot2(z_psi) @ antenna_offset - anchor_pos
    r = float(np.linalg.norm(d))
    return r, (d / r if r > 0.0 else d)


def range_jacobian(zeta: np.ndarray, anchor_pos, antenna_offset, z_psi: float) -> np.ndarray:
    _, e = predicted_range(zeta, np.asarray(anchor_pos, float), np.asarray(antenna_offset, float), z_psi)
    return np.array([[e[0], e[1], 0.0, 0.0]])


def _underweight(est: EstimatorState, anchor_id: int, stamp: float, cfg: FilterConfig) -> Tuple[int, float]:
    left = est.underweight_left.get(anchor_id, 0)
    last = est.last_range.get(anchor_id)
    if last is not None and stamp - last > cfg.underweight_gap_s:
        left = cfg.underweight_updates
    if left <= 0 or cfg.underweight_updates == 0:
        return 0, 1.0
    # anneals geometrically from the full factor to 1
    return left, cfg.underweight_factor ** (left / cfg.underweight_updates)


def update_range(
    est: EstimatorState,
    meas: RangeMeasurement,
    anchor_pos: np.ndarray,
    antenna_offset: np.ndarray,
    z_psi: float,
    cfg: FilterConfig,
) -> Tuple[EstimatorState, GateOutcome]:
    anchor_pos = np.asarray(anchor_pos, dtype=float)
    antenna_offset = np.asarray(antenna_offset, dtype=float)
    r_hat, e = predicted_range(est.zeta, anchor_pos, antenna_offset, z_psi)
    if r_hat < 1e-9:
        logger.debug("anchor %d coincides with the antenna estimate; range skipped", meas.anchor_id)
        return est, GateOutcome(False, 0.0, degenerate=True)
    left, beta = _underweight(est, meas.anchor_id, meas.stamp, cfg)
    H = np.array([[e[0], e[1], 0.0, 0.0]])
    R = np.array([[beta * cfg.uwb_sigma_m ** 2]])
    gate = cfg.gate_range if cfg.gating_enabled else None
    new, outcome = _joseph_update(est, np.array([meas.range_m - r_hat]), H, R, gate, "range update")
    if not outcome.accepted:
        logger.debug("range from anchor %d gated out (d2=%.2f)", meas.anchor_id, outcome.d2)
        streak = est.rejected_streak + 1
        if streak >= cfg.lockout_rejections:
            return _reset_position(est, cfg, streak), replace(outcome, weight=beta, reset=True)
        # mean and covariance untouched
        return replace(est, rejected_streak=streak), replace(outcome, weight=beta)
    last_range = dict(est.last_range)
    last_range[meas.anchor_id] = meas.stamp
    remaining = dict(est.underweight_left)
    remaining[meas.anchor_id] = max(0, left - 1)
    new = replace(
        new,
        last_range=last_range,
        underweight_left=remaining,
        accepted_ranges=est.accepted_ranges + 1,
        rejected_streak=0,
    )
    return new, replace(outcome, weight=beta)


def _reset_position(est: EstimatorState, cfg: FilterConfig, streak: int) -> EstimatorState:
    """Re-open the position block to its initial variance; velocity block and mean are kept."""
    logger.warning(
        "%d consecutive ranges gated out; position covariance reset (trace was %.3g)", streak, est.position_trace
    )
    P = est.P.copy()
    P[:2, :] = 0.0
    P[:, :2] = 0.0
    P[:2, :2] = np.diag(cfg.initial_cov_diag[:2])
    return replace(est, P=_check(P, "position reset"), rejected_streak=0, accepted_ranges=0)


def update_vision_pose(
    est: EstimatorState, pose_meas: PlanarPose, cfg: FilterConfig
) -> Tuple[EstimatorState, GateOutcome]:
    """Position part of a vision pose fix; the heading goes to the attitude source, not the state."""
    nu = np.array([pose_meas.x, pose_meas.y]) - est.zeta[:2]
    R = np.diag(np.maximum(np.diag(pose_meas.cov)[:2], cfg.vision_cov_diag[:2]))
    H = np.hstack([_I2, _Z2])
    gate = cfg.gate_vector if cfg.gating_enabled else None
    return _joseph_update(est, nu, H, R, gate, "vision update")


def gate_vision_heading(pose_meas: PlanarPose, psi_ref: float, cfg: FilterConfig) -> GateOutcome:
    """1-DOF check of a vision heading against the attitude in use before it may replace it."""
    var = max(float(pose_meas.cov[2, 2]), cfg.vision_cov_diag[2])
    nu = wrap_angle(pose_meas.psi - psi_ref)
    d2 = nu * nu / var
    return GateOutcome(not cfg.gating_enabled or d2 <= cfg.gate_range, d2)


# --------------------
# Initialization
# --------------------
def trilaterate(
    ranges: Dict[int, float],
    anchors: AnchorSet,
    z_psi: float = 0.0,
    f_scale: float = 0.05,
    residual_tol: float = 0.15,
) -> np.ndarray:
    """Module position from one round of anchor ranges.

    Linear least squares seeds a soft-L1 fit; anchors left with a residual above ``residual_tol``
    are dropped and the rest refit, as long as three remain.
    """
    ids = sorted(ranges)
    if len(ids) < 3:
        raise ValueError(f"trilateration needs 3 or more anchors, got {len(ids)}")
    A_all = anchors.as_array()
    a = A_all[ids]
    r = np.array([ranges[i] for i in ids])
    M = 2.0 * (a[1:] - a[0])
    b = np.sum(a[1:] ** 2, axis=1) - np.sum(a[0] ** 2) - r[1:] ** 2 + r[0] ** 2
    p0, *_ = np.linalg.lstsq(M, b, rcond=None)

    def residuals(p, a=a, r=r):
        return np.linalg.norm(a - p, axis=1) - r

    robust = least_squares(residuals, p0, loss="soft_l1", f_scale=f_scale)
    antenna = robust.x if robust.success else p0
    keep = np.abs(residuals(antenna)) <= residual_tol
    if 3 <= int(keep.sum()) < len(ids):
        dropped = [i for i, k in zip(ids, keep) if not k]
        logger.warning("anchors %s dropped from trilateration (residual above %.2f m)", dropped, residual_tol)
    if int(keep.sum()) >= 3:
        fit = least_squares(lambda p: residuals(p, a[keep], r[keep]), antenna, method="lm")
        if fit.success:
            antenna = fit.x
    else:
        logger.warning("fewer than 3 consistent anchors; keeping the robust fit")
    return antenna - rot2(z_psi) @ np.asarray(anchors.antenna_offset_m, dtype=float)


def initialize(
    measurements: Iterable[RangeMeasurement],
    anchors: AnchorSet,
    z_psi: float,
    cfg: FilterConfig,
    stamp: float = 0.0,
) -> EstimatorState:
    ranges = {m.anchor_id: m.range_m for m in measurements}
    pos = trilaterate(ranges, anchors, z_psi, f_scale=cfg.uwb_sigma_m, residual_tol=cfg.init_residual_m)
    logger.info("estimator initialized at (%.3f, %.3f) from %d anchors", pos[0], pos[1], len(ranges))
    return EstimatorState(
        zeta=np.array([pos[0], pos[1], 0.0, 0.0]),
        P=np.diag(cfg.initial_cov_diag).astype(float),
        stamp=stamp,
        last_range={i: stamp for i in ranges},
    )


def speed(est: EstimatorState) -> float:
    return math.hypot(est.zeta[2], est.zeta[3])
