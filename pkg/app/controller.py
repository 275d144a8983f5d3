# app/controller.py
"""Fixed-timestep scenario loop: truth -> sensors -> estimator/vision -> guidance -> dynamics.

The truth model runs at ``rates.sim_hz``; every other clock fires on the nearest simulation tick
(``is_due``). Each sensor draws from its own RNG stream spawned from the scenario seed.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from app.log_writer import build_frame, write_logs
from app.metrics.audit import compute_run_metrics
from geometry import camera_in_body, is_spd, planar_pose3, wrap_angle
from models import (
    BodyState,
    BodyWrench,
    FeatureObservation,
    Pose3,
    RangeMeasurement,
    RunMetrics,
    Scenario,
    TargetConfig,
    ThrusterCommand,
)
from onboard.estimator import (
    CovarianceError,
    EstimatorState,
    GateOutcome,
    gate_vision_heading,
    initialize,
    predict,
    update_accel,
    update_range,
    update_vision_pose,
)
from onboard.guidance import TERMINAL_PHASES, GuidancePhase, GuidanceState, step_guidance
from onboard.vision import (
    VisionError,
    VisionState,
    camera_rate,
    covariance_healthy,
    identify_face,
    init_vision_state,
    planar_pose_output,
    prior_from_estimate,
    solve_pose,
    vision_ekf_update,
    vision_predict,
)
from world.dynamics import allocate, allocation_matrix, step
from world.sensors import project_features, sample_accel, sample_attitude, sample_gyro, sample_uwb

logger = logging.getLogger(__name__)

SENSOR_STREAMS = ("gyro", "attitude", "accel", "uwb", "vision", "jitter")


class ScenarioAborted(RuntimeError):
    def __init__(self, message: str, frames: Optional[Dict[str, pd.DataFrame]] = None):
        super().__init__(message)
        self.frames = frames or {}


@dataclass
class RunResult:
    metrics: RunMetrics
    frames: Dict[str, pd.DataFrame]
    paths: Dict[str, str] = field(default_factory=dict)


def is_due(k: int, rate_hz: int, sim_hz: int) -> bool:
    """Nearest-tick schedule: fires on the first tick of each rate period."""
    return k == 0 or (k * rate_hz) // sim_hz != ((k - 1) * rate_hz) // sim_hz


def scheduled_ticks(n_ticks: int, rate_hz: int, sim_hz: int) -> int:
    return 0 if n_ticks <= 0 else ((n_ticks - 1) * rate_hz) // sim_hz + 1


def sensor_streams(seed: int) -> Dict[str, np.random.Generator]:
    children = np.random.SeedSequence(seed).spawn(len(SENSOR_STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(SENSOR_STREAMS, children)}


def initial_state(sc: Scenario) -> BodyState:
    i = sc.initial
    return BodyState(i.x_m, i.y_m, wrap_angle(i.psi_rad), i.u_mps, i.v_mps, i.omega_radps)


def target_module_pose(target: TargetConfig) -> Pose3:
    """Marker-cube pose in the world: beyond the docking point, face 0 looking back at the chaser."""
    axis = np.array([math.cos(target.psi_rad), math.sin(target.psi_rad)])
    centre = target.position + target.module_standoff_m * axis
    return planar_pose3(float(centre[0]), float(centre[1]), target.psi_rad + math.pi)


class _ScenarioRun:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.rates = sc.rates
        self.dt = 1.0 / sc.rates.sim_hz
        self.n_ticks = int(round(sc.duration_s * sc.rates.sim_hz))
        self.rng = sensor_streams(sc.seed)
        self.anchors = sc.anchors.as_array()
        self.antenna = np.asarray(sc.anchors.antenna_offset_m, dtype=float)
        self.body_from_camera = camera_in_body(sc.mount)

        self.truth = initial_state(sc)
        self.cmd = ThrusterCommand.zero(sc.module.n_nozzles)
        self.target = sc.target
        self.target_pose = target_module_pose(sc.target)
        self.est: Optional[EstimatorState] = None
        self.gs = GuidanceState()
        self.logged_transitions = 0
        self.vs: Optional[VisionState] = None
        self.vision_active = False
        self.attitude_source = "ahrs"
        self.vision_psi: Optional[float] = None
        self.heading_rejects = 0
        self.psi_hat = 0.0
        self.omega_hat = 0.0
        self.pending: List[Tuple[float, int, str, object]] = []
        self.seq = 0
        self.abort_reason: Optional[str] = None

        self.truth_rows: List[tuple] = []
        self.est_rows: List[tuple] = []
        self.meas_rows: List[tuple] = []
        self.phase_rows: List[tuple] = []

    # --------------------
    # Logging
    # --------------------
    def _log_truth(self, t: float) -> None:
        s = self.truth
        d = list(self.cmd.duties[:4]) + [math.nan] * max(0, 4 - len(self.cmd.duties))
        self.truth_rows.append((t, s.x, s.y, s.psi, s.u, s.v, s.omega, *d))

    def _log_estimate(self, t: float, event: str = "") -> None:
        e, s = self.est, self.truth
        z = e.zeta if e is not None else np.full(4, math.nan)
        P = e.P if e is not None else np.full((4, 4), math.nan)
        cov_ok = int(e is not None and is_spd(e.P) and (self.vs is None or covariance_healthy(self.vs)))
        self.est_rows.append(
            (
                t, z[0], z[1], z[2], z[3], P[0, 0], P[1, 1], P[2, 2], P[3, 3], P[0, 1],
                self.psi_hat, self.omega_hat, self.attitude_source, self.gs.phase.value,
                int(self.vs is not None and self.vs.converged), cov_ok,
                s.x, s.y, s.psi, s.u, s.v, event,
            )
        )

    def _log_meas(
        self,
        t: float,
        sensor: str,
        outcome: Optional[GateOutcome],
        anchor_id: int = -1,
        value: float = math.nan,
        meas: Optional[RangeMeasurement] = None,
        note: str = "",
    ) -> None:
        self.meas_rows.append(
            (
                t, sensor, anchor_id, value,
                int(outcome is not None and outcome.accepted),
                outcome.d2 if outcome is not None else math.nan,
                outcome.weight if outcome is not None else math.nan,
                int(meas is not None and meas.outlier_component),
                int(meas is not None and meas.gross_outlier),
                note,
            )
        )

    def _log_transitions(self) -> None:
        for t, phase, reason in self.gs.transitions[self.logged_transitions:]:
            self.phase_rows.append((t, phase, reason))
            if GuidancePhase(phase) == GuidancePhase.TERMINAL_LOCK and self.sc.vision.enabled:
                self.vision_active = True
        self.logged_transitions = len(self.gs.transitions)

    # --------------------
    # Sensors
    # --------------------
    def _camera_pose(self) -> Pose3:
        s = self.truth
        return planar_pose3(s.x, s.y, s.psi).compose(self.body_from_camera)

    def _push(self, stamp: float, kind: str, payload: object) -> None:
        self.pending.append((stamp, self.seq, kind, payload))
        self.seq += 1

    def _sample_uwb(self, t: float) -> None:
        jitter = self.rates.uwb_jitter_s
        stamp = t + (self.rng["jitter"].uniform(0.0, jitter) if jitter > 0 else 0.0)
        for m in sample_uwb(self.truth, self.sc.anchors, self.target.position, self.sc.noise, self.rng["uwb"], stamp):
            self._push(m.stamp, "uwb", m)

    def _sample_vision(self, t: float) -> None:
        feats = project_features(
            self._camera_pose(), self.target_pose, self.sc.markers, self.sc.camera, self.sc.noise, self.rng["vision"], t
        )
        self._push(t, "vision", feats)

    # --------------------
    # Estimation
    # --------------------
    def _try_initialize(self, t: float, z_psi: float) -> None:
        latest: Dict[int, RangeMeasurement] = {}
        keep = []
        for item in self.pending:
            stamp, _, kind, payload = item
            if kind == "uwb" and stamp <= t:
                latest[payload.anchor_id] = payload
            elif stamp > t:
                keep.append(item)
        self.pending = keep
        if len(latest) < len(self.anchors):
            # wait for a full round; only the newest range per anchor is kept
            for m in latest.values():
                self._push(m.stamp, "uwb", m)
            return
        self.est = initialize(latest.values(), self.sc.anchors, z_psi, self.sc.filter, stamp=t)
        for m in latest.values():
            self._log_meas(m.stamp, "uwb", None, m.anchor_id, m.range_m, m, note="init")
        if self.sc.mission != "profile":
            self.gs = GuidanceState(phase=GuidancePhase.SETTLE, entered_at=t, transitions=((t, "SETTLE", "estimator initialized"),))
            self._log_transitions()

    def _process_vision(self, stamp: float, feats: List[FeatureObservation]) -> None:
        vcfg = self.sc.vision
        if not feats:
            self._log_meas(stamp, "vision", None, note="error:NoFeatures")
            return
        try:
            if self.vs is None:
                prior = prior_from_estimate(self.est.position, self.psi_hat, self.body_from_camera, self.target_pose)
                pose, match = solve_pose(feats, self.sc.markers, vcfg, prior=prior)
                self.vs = init_vision_state(pose, vcfg, stamp, match.face_id)
                logger.info("t=%.3f vision initialized on face %d", stamp, match.face_id)
            else:
                match = identify_face(feats, self.sc.markers, vcfg.face_tolerance)
            self.vs = vision_ekf_update(self.vs, match.correspondences, self.sc.camera, vcfg)
            if not self.vs.converged:
                self._log_meas(stamp, "vision", None, note="converging")
                return
            pose = planar_pose_output(self.vs, self.sc.mount, self.target_pose, self.sc.filter.vision_cov_diag)
        except VisionError as e:
            logger.debug("t=%.3f vision frame dropped: %s", stamp, e)
            self._log_meas(stamp, "vision", None, note=f"error:{type(e).__name__}")
            return
        heading = gate_vision_heading(pose, self.psi_hat, self.sc.filter)
        if not heading.accepted:
            self._log_meas(stamp, "vision", heading, value=pose.psi)
            self.heading_rejects += 1
            if self.heading_rejects >= vcfg.heading_reject_limit:
                logger.warning("t=%.3f vision heading rejected %d times in a row; re-solving", stamp, self.heading_rejects)
                self._drop_vision()
            return
        self.heading_rejects = 0
        self.est, outcome = update_vision_pose(self.est, pose, self.sc.filter)
        self._log_meas(stamp, "vision", outcome, value=pose.psi)
        if outcome.accepted:
            if self.attitude_source != "vision":
                logger.info("t=%.3f attitude source switched to vision", stamp)
            self.attitude_source = "vision"
            self.vision_psi = pose.psi

    def _drop_vision(self) -> None:
        self.vs = None
        self.heading_rejects = 0
        self.attitude_source = "ahrs"
        self.vision_psi = None

    def _estimator_tick(self, t: float, z_gyro: float, z_psi: float, z_acc: np.ndarray) -> None:
        sc = self.sc
        self.omega_hat = z_gyro
        if self.est is None:
            self.psi_hat = z_psi
            self._try_initialize(t, z_psi)
            if self.est is not None:
                self._log_estimate(t)
            return

        dt = t - self.est.stamp
        if self.attitude_source == "vision" and self.vision_psi is not None:
            self.vision_psi = wrap_angle(self.vision_psi + z_gyro * dt)
            self.psi_hat = self.vision_psi
        else:
            self.psi_hat = z_psi
        if dt > 0.0:
            self.est = predict(self.est, self.cmd, z_gyro, self.psi_hat, sc.module, sc.filter, dt)
            if self.vs is not None:
                self.vs = vision_predict(self.vs, camera_rate(z_gyro, sc.mount), sc.vision, dt)

        due = sorted((item for item in self.pending if item[0] <= t), key=lambda item: (item[0], item[1]))
        self.pending = [item for item in self.pending if item[0] > t]
        for stamp, _, kind, payload in due:
            if kind == "uwb":
                m: RangeMeasurement = payload
                self.est, outcome = update_range(
                    self.est, m, self.anchors[m.anchor_id], self.antenna, self.psi_hat, sc.filter
                )
                self._log_meas(stamp, "uwb", outcome, m.anchor_id, m.range_m, m, "degenerate" if outcome.degenerate else "")
            elif kind == "vision":
                self._process_vision(stamp, payload)

        if sc.filter.accel_updates_enabled:
            self.est, outcome = update_accel(self.est, z_acc, self.cmd, sc.module, sc.filter)
            self._log_meas(t, "accel", outcome, value=float(np.hypot(z_acc[0], z_acc[1])))
        self._log_estimate(t)

    # --------------------
    # Commands
    # --------------------
    def _profile_command(self, t: float) -> ThrusterCommand:
        p = self.sc.profile
        B = allocation_matrix(self.sc.module)
        axis = int(t // p.segment_s) % 2
        reach = float(np.sum(np.clip(B[axis], 0.0, None)))
        f = p.duty * reach
        wrench = BodyWrench(f, 0.0, 0.0) if axis == 0 else BodyWrench(0.0, f, 0.0)
        return allocate(wrench, self.sc.module)

    def _command_tick(self, t: float) -> None:
        sc = self.sc
        if sc.mission == "profile":
            self.cmd = self._profile_command(t)
            return
        if self.est is None:
            return
        self.gs, self.cmd = step_guidance(
            self.gs,
            self.est,
            self.psi_hat,
            self.omega_hat,
            self.vs is not None and self.vs.converged,
            self.target,
            sc.guidance,
            sc.module,
            t,
            sc.mission,
        )
        self._log_transitions()

    def _move_target(self, t: float) -> None:
        v = self.sc.target.velocity_mps
        base = self.sc.target
        self.target = base.model_copy(update={"x_m": base.x_m + v[0] * t, "y_m": base.y_m + v[1] * t})
        self.target_pose = target_module_pose(self.target)

    def _finite(self) -> bool:
        if not all(math.isfinite(v) for v in self.truth.as_tuple()):
            return False
        return self.est is None or bool(np.all(np.isfinite(self.est.zeta)) and np.all(np.isfinite(self.est.P)))

    # --------------------
    # Loop
    # --------------------
    def execute(self) -> None:
        sc, r = self.sc, self.rates
        mobile = sc.guidance.mobile_target and any(sc.target.velocity_mps)
        for k in range(self.n_ticks):
            t = k * self.dt
            if mobile:
                self._move_target(t)
            if is_due(k, r.truth_log_hz, r.sim_hz):
                self._log_truth(t)
            imu = is_due(k, r.imu_hz, r.sim_hz)
            if imu:
                z_gyro = sample_gyro(self.truth, sc.noise, self.rng["gyro"])
                z_psi = sample_attitude(self.truth, sc.noise, self.rng["attitude"])
                z_acc = sample_accel(self.truth, self.cmd, sc.module, sc.noise, self.rng["accel"])
            if is_due(k, r.uwb_hz, r.sim_hz):
                self._sample_uwb(t)
            if self.vision_active and is_due(k, r.vision_hz, r.sim_hz):
                self._sample_vision(t)
            try:
                if imu:
                    self._estimator_tick(t, z_gyro, z_psi, z_acc)
                if is_due(k, r.command_hz, r.sim_hz):
                    self._command_tick(t)
            except CovarianceError as e:
                self.abort_reason = f"t={t:.6f}: {e}"
                self._log_estimate(t, event="cov_abort")
                break
            if not self._finite():
                self.abort_reason = f"t={t:.6f}: non-finite state"
                self._log_estimate(t, event="nan_abort")
                break
            if self.gs.phase in TERMINAL_PHASES:
                logger.info("t=%.3f run finished in %s", t, self.gs.phase.value)
                break
            self.truth = step(self.truth, self.cmd, sc.module, self.dt)

    def frames(self) -> Dict[str, pd.DataFrame]:
        return {
            "truth": build_frame("truth", self.truth_rows),
            "estimate": build_frame("estimate", self.est_rows),
            "measurements": build_frame("measurements", self.meas_rows),
            "phases": build_frame("phases", self.phase_rows),
        }


def run_scenario(sc: Scenario, out_dir: Optional[str] = None) -> RunResult:
    """Run one scenario; CSV logs go to ``out_dir`` when given. Raises ScenarioAborted on a non-finite state."""
    logger.info("running scenario %s (mission=%s, seed=%d)", sc.name, sc.mission, sc.seed)
    run = _ScenarioRun(sc)
    run.execute()
    frames = run.frames()
    paths = write_logs(frames, out_dir) if out_dir else {}
    if run.abort_reason is not None:
        logger.error("scenario %s aborted: %s", sc.name, run.abort_reason)
        raise ScenarioAborted(run.abort_reason, frames)
    return RunResult(compute_run_metrics(frames, sc), frames, paths)
