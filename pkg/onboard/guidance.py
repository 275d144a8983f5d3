# onboard/guidance.py
"""Docking guidance state machine.

Phases run SETTLE -> ACQUIRE_LOS -> LOS_CLOSE -> TERMINAL_LOCK -> ALIGN -> FINAL_APPROACH -> DOCKED,
with ABORT reachable from anywhere. Waypoint missions stop at LOS_CLOSE and station-keep on the
target; profile missions never call into this module.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, FrozenSet, Optional, Tuple

import numpy as np

from geometry import rot2, wrap_angle
from models import BodyWrench, GuidanceConfig, Mission, ModuleParams, TargetConfig, ThrusterCommand
from onboard.estimator import EstimatorState, speed
from world.dynamics import allocate

logger = logging.getLogger(__name__)


class GuidancePhase(str, Enum):
    SETTLE = "SETTLE"
    ACQUIRE_LOS = "ACQUIRE_LOS"
    LOS_CLOSE = "LOS_CLOSE"
    TERMINAL_LOCK = "TERMINAL_LOCK"
    ALIGN = "ALIGN"
    FINAL_APPROACH = "FINAL_APPROACH"
    DOCKED = "DOCKED"
    ABORT = "ABORT"


_NEXT: Dict[GuidancePhase, FrozenSet[GuidancePhase]] = {
    GuidancePhase.SETTLE: frozenset({GuidancePhase.ACQUIRE_LOS}),
    GuidancePhase.ACQUIRE_LOS: frozenset({GuidancePhase.LOS_CLOSE}),
    GuidancePhase.LOS_CLOSE: frozenset({GuidancePhase.TERMINAL_LOCK}),
    GuidancePhase.TERMINAL_LOCK: frozenset({GuidancePhase.ALIGN}),
    GuidancePhase.ALIGN: frozenset({GuidancePhase.FINAL_APPROACH}),
    GuidancePhase.FINAL_APPROACH: frozenset({GuidancePhase.DOCKED}),
    GuidancePhase.DOCKED: frozenset(),
    GuidancePhase.ABORT: frozenset(),
}

TERMINAL_PHASES = frozenset({GuidancePhase.DOCKED, GuidancePhase.ABORT})


class InvalidTransitionError(RuntimeError):
    pass


def allowed_transition(a: GuidancePhase, b: GuidancePhase) -> bool:
    if a == b:
        return True
    if b == GuidancePhase.ABORT:
        return a not in TERMINAL_PHASES
    return b in _NEXT[a]


@dataclass(frozen=True)
class GuidanceState:
    phase: GuidancePhase = GuidancePhase.SETTLE
    entered_at: float = 0.0
    heading_ref: Optional[float] = None
    hold_point: Optional[Tuple[float, float]] = None
    reason: str = ""
    # (t, phase, reason) for every phase entered, in order
    transitions: Tuple[Tuple[float, str, str], ...] = ()


def _enter(gs: GuidanceState, phase: GuidancePhase, t: float, reason: str, **kw) -> GuidanceState:
    if not allowed_transition(gs.phase, phase):
        raise InvalidTransitionError(f"{gs.phase.value} -> {phase.value}")
    logger.info("t=%.3f guidance %s -> %s (%s)", t, gs.phase.value, phase.value, reason)
    return replace(
        gs, phase=phase, entered_at=t, reason=reason, transitions=gs.transitions + ((t, phase.value, reason),), **kw
    )


# --------------------
# Control laws
# --------------------
def heading_torque(heading_err: float, omega_hat: float, cfg: GuidanceConfig) -> float:
    return cfg.heading_kp * heading_err - cfg.heading_kd * omega_hat


def los_command(
    est: EstimatorState,
    psi_hat: float,
    omega_hat: float,
    goal: np.ndarray,
    heading_ref: float,
    cfg: GuidanceConfig,
    params: ModuleParams,
    kp: Optional[float] = None,
    kd: Optional[float] = None,
) -> ThrusterCommand:
    """PD on position error (world frame) and heading, mapped through the inverse allocation."""
    kp = cfg.pos_kp if kp is None else kp
    kd = cfg.pos_kd if kd is None else kd
    R = rot2(psi_hat)
    v_world = R @ est.body_velocity
    f_world = kp * (np.asarray(goal, dtype=float) - est.position) - kd * v_world
    f_body = R.T @ f_world
    tau = heading_torque(wrap_angle(heading_ref - psi_hat), omega_hat, cfg)
    return allocate(BodyWrench(float(f_body[0]), float(f_body[1]), tau), params)


def torque_command(heading_err: float, omega_hat: float, cfg: GuidanceConfig, params: ModuleParams) -> ThrusterCommand:
    return allocate(BodyWrench(0.0, 0.0, heading_torque(heading_err, omega_hat, cfg)), params)


# --------------------
# Target geometry
# --------------------
def dock_axis(target: TargetConfig) -> np.ndarray:
    return np.array([math.cos(target.psi_rad), math.sin(target.psi_rad)])


def cross_track(pos: np.ndarray, target: TargetConfig) -> Tuple[float, float]:
    """(along-track, cross-track) offsets of pos from the docking point in the docking-axis frame."""
    d = rot2(target.psi_rad).T @ (np.asarray(pos, dtype=float) - target.position)
    return float(d[0]), float(d[1])


def los_angle(pos: np.ndarray, goal: np.ndarray) -> float:
    d = np.asarray(goal, dtype=float) - np.asarray(pos, dtype=float)
    return math.atan2(d[1], d[0])


# --------------------
# State machine
# --------------------
def step_guidance(
    gs: GuidanceState,
    est: EstimatorState,
    psi_hat: float,
    omega_hat: float,
    vision_converged: bool,
    target: TargetConfig,
    cfg: GuidanceConfig,
    params: ModuleParams,
    t: float,
    mission: Mission = "docking",
) -> Tuple[GuidanceState, ThrusterCommand]:
    zero = ThrusterCommand.zero(params.n_nozzles)
    phase = gs.phase
    if phase in TERMINAL_PHASES:
        return gs, zero
    if phase != GuidancePhase.SETTLE and est.position_trace > cfg.cov_ceiling_m2:
        return _enter(gs, GuidancePhase.ABORT, t, f"position covariance {est.position_trace:.3g} above ceiling"), zero

    goal = target.position
    pos = est.position
    rng = float(np.linalg.norm(goal - pos))

    if phase == GuidancePhase.SETTLE:
        if est.position_trace < cfg.settle_trace_m2 and est.accepted_ranges >= cfg.settle_min_ranges:
            gs = _enter(gs, GuidancePhase.ACQUIRE_LOS, t, f"covariance settled after {est.accepted_ranges} ranges")
            phase = gs.phase
        else:
            return gs, zero

    if phase == GuidancePhase.ACQUIRE_LOS:
        err = wrap_angle(los_angle(pos, goal) - psi_hat)
        if abs(err) < cfg.los_deadband_rad and abs(omega_hat) < cfg.los_rate_tol_radps:
            gs = _enter(gs, GuidancePhase.LOS_CLOSE, t, "line of sight acquired", heading_ref=los_angle(pos, goal))
            phase = gs.phase
        else:
            return gs, torque_command(err, omega_hat, cfg, params)

    if phase == GuidancePhase.LOS_CLOSE:
        if mission == "docking" and rng < cfg.handover_radius_m:
            gs = _enter(gs, GuidancePhase.TERMINAL_LOCK, t, f"within {cfg.handover_radius_m} m", hold_point=(float(pos[0]), float(pos[1])))
            phase = gs.phase
        else:
            heading_ref = gs.heading_ref if gs.heading_ref is not None else psi_hat
            if rng > 2.0 * cfg.handover_radius_m:
                heading_ref = los_angle(pos, goal)
            elif mission == "docking":
                heading_ref = target.psi_rad
            gs = replace(gs, heading_ref=heading_ref)
            return gs, los_command(est, psi_hat, omega_hat, goal, heading_ref, cfg, params)

    if phase == GuidancePhase.TERMINAL_LOCK:
        if vision_converged:
            gs = _enter(gs, GuidancePhase.ALIGN, t, "vision converged")
            phase = gs.phase
        elif t - gs.entered_at > cfg.terminal_timeout_s:
            return _enter(gs, GuidancePhase.ABORT, t, "vision lock timeout"), zero
        else:
            hold = np.asarray(gs.hold_point if gs.hold_point is not None else pos, dtype=float)
            return gs, los_command(est, psi_hat, omega_hat, hold, target.psi_rad, cfg, params)

    heading_err = wrap_angle(target.psi_rad - psi_hat)
    along, cross = cross_track(pos, target)

    if phase == GuidancePhase.ALIGN:
        if abs(cross) < cfg.align_cross_track_m and abs(heading_err) < cfg.align_heading_rad:
            gs = _enter(gs, GuidancePhase.FINAL_APPROACH, t, "aligned with docking axis")
            phase = gs.phase
        else:
            on_axis = goal + along * dock_axis(target)
            return gs, los_command(est, psi_hat, omega_hat, on_axis, target.psi_rad, cfg, params)

    # FINAL_APPROACH
    if rng < cfg.dock_radius_m and abs(heading_err) < cfg.align_heading_rad and speed(est) < cfg.dock_speed_mps:
        return _enter(gs, GuidancePhase.DOCKED, t, f"separation {rng:.4f} m"), zero
    return gs, los_command(
        est, psi_hat, omega_hat, goal, target.psi_rad, cfg, params, kp=cfg.final_kp, kd=cfg.final_kd
    )
