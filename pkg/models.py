from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

STANDARD_GRAVITY = 9.81
_S = 1.0 / math.sqrt(2.0)


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --------------------
# Module / actuators
# --------------------
class NozzleSpec(StrictModel):
    direction: Tuple[float, float]
    arm_sign: float = Field(0.0, ge=-1.0, le=1.0)

    @field_validator("direction")
    @classmethod
    def _unit_direction(cls, v: Tuple[float, float]) -> Tuple[float, float]:
        n = math.hypot(v[0], v[1])
        if n == 0.0:
            raise ValueError("nozzle direction must be non-zero")
        return (v[0] / n, v[1] / n)


def x_configuration() -> List[NozzleSpec]:
    # forward/rear/left/right pairs give pure forces, diagonal pairs pure torque
    return [
        NozzleSpec(direction=(_S, _S), arm_sign=1.0),
        NozzleSpec(direction=(_S, -_S), arm_sign=-1.0),
        NozzleSpec(direction=(-_S, _S), arm_sign=-1.0),
        NozzleSpec(direction=(-_S, -_S), arm_sign=1.0),
    ]


class ModuleParams(StrictModel):
    mass_kg: float = Field(0.795, gt=0)
    inertia_kgm2: float = Field(4.987689e-3, gt=0)
    friction_mu: float = Field(0.015, ge=0)
    gravity_mps2: float = Field(STANDARD_GRAVITY, gt=0)
    nozzle_thrust_n: float = Field(0.1, ge=0)
    nozzle_arm_m: float = Field(0.05, ge=0)
    # 1 rad/s spin halves in ~5 s with the default inertia
    rot_damping_nms: float = Field(6.914e-4, ge=0)
    nozzles: List[NozzleSpec] = Field(default_factory=x_configuration)

    @property
    def n_nozzles(self) -> int:
        return len(self.nozzles)


# --------------------
# Sensors
# --------------------
class NoiseConfig(StrictModel):
    gyro_sigma_radps: float = Field(0.0035, ge=0)
    attitude_sigma_rad: float = Field(0.002, ge=0)
    accel_sigma_mps2: float = Field(0.05 * STANDARD_GRAVITY, ge=0)
    uwb_inlier_sigma_m: float = Field(0.01, ge=0)
    uwb_outlier_sigma_m: float = Field(0.10, ge=0)
    uwb_outlier_prob: float = Field(0.10, ge=0, le=1)
    uwb_near_field_m: float = Field(0.10, ge=0)
    feature_sigma_px: float = Field(0.5, ge=0)
    # outlier-component draws beyond this many inlier sigmas are labeled gross
    gross_outlier_factor: float = Field(4.0, gt=0)

    @classmethod
    def noiseless(cls, **overrides) -> "NoiseConfig":
        base = dict(
            gyro_sigma_radps=0.0,
            attitude_sigma_rad=0.0,
            accel_sigma_mps2=0.0,
            uwb_inlier_sigma_m=0.0,
            uwb_outlier_sigma_m=0.0,
            uwb_outlier_prob=0.0,
            feature_sigma_px=0.0,
        )
        base.update(overrides)
        return cls(**base)


class AnchorSet(StrictModel):
    positions_m: List[Tuple[float, float]] = Field(
        default_factory=lambda: [(0.0, 0.0), (3.0, 0.0), (3.0, 3.0), (0.0, 3.0)]
    )
    antenna_offset_m: Tuple[float, float] = (0.0, 0.0)

    @field_validator("positions_m")
    @classmethod
    def _geometry(cls, v: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
        if len(v) < 3:
            raise ValueError("at least 3 anchors are required for planar trilateration")
        pts = np.asarray(v, dtype=float)
        for i in range(len(pts)):
            for j in range(i + 1, len(pts)):
                if np.linalg.norm(pts[i] - pts[j]) < 1e-9:
                    raise ValueError(f"anchors {i} and {j} coincide")
        centered = pts - pts.mean(axis=0)
        if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
            raise ValueError("anchors are collinear")
        return v

    def as_array(self) -> np.ndarray:
        return np.asarray(self.positions_m, dtype=float)


class CameraIntrinsics(StrictModel):
    fx_px: float = Field(400.0, gt=0)
    fy_px: float = Field(400.0, gt=0)
    u0_px: float = 0.0
    v0_px: float = 0.0


class CameraMount(StrictModel):
    """Camera pose in the chaser body frame (planar offset and yaw of the optical axis)."""

    offset_m: Tuple[float, float] = (0.0, 0.0)
    yaw_rad: float = 0.0


class MarkerFace(StrictModel):
    face_id: int
    normal: Tuple[float, float, float]
    markers: List[Tuple[float, float, float]]

    @field_validator("markers")
    @classmethod
    def _three_markers(cls, v):
        if len(v) != 3:
            raise ValueError("each face carries exactly 3 markers")
        return v

    def points(self) -> np.ndarray:
        return np.asarray(self.markers, dtype=float)

    def edge_lengths(self) -> np.ndarray:
        p = self.points()
        # edges opposite to marker 2, 1, 0
        return np.array(
            [
                np.linalg.norm(p[0] - p[1]),
                np.linalg.norm(p[0] - p[2]),
                np.linalg.norm(p[1] - p[2]),
            ]
        )

    def signature(self) -> np.ndarray:
        d = np.sort(self.edge_lengths())
        return d[:2] / d[2]


def _face(face_id: int, normal, h_axis, leg_v: float, leg_h: float, half: float = 0.05) -> MarkerFace:
    n = np.asarray(normal, dtype=float)
    h = np.asarray(h_axis, dtype=float)
    v = np.array([0.0, 0.0, 1.0])
    c = half * n
    m0 = c - 0.5 * leg_h * h - 0.5 * leg_v * v
    m1 = m0 + leg_v * v
    m2 = m0 + leg_h * h
    return MarkerFace(
        face_id=face_id,
        normal=tuple(n.tolist()),
        markers=[tuple(m.tolist()) for m in (m0, m1, m2)],
    )


def default_marker_faces() -> List[MarkerFace]:
    # right triangles, right angle at marker 0, short leg vertical
    # leg ratios 0.45 to 0.9 keep signatures and edge ranks apart by more than the match tolerance
    return [
        _face(0, (1, 0, 0), (0, 1, 0), 0.036, 0.08),
        _face(1, (0, 1, 0), (-1, 0, 0), 0.048, 0.08),
        _face(2, (-1, 0, 0), (0, -1, 0), 0.06, 0.08),
        _face(3, (0, -1, 0), (1, 0, 0), 0.072, 0.08),
    ]


class MarkerSet(StrictModel):
    faces: List[MarkerFace] = Field(default_factory=default_marker_faces)

    @model_validator(mode="after")
    def _unique_patterns(self) -> "MarkerSet":
        ids = [f.face_id for f in self.faces]
        if len(set(ids)) != len(ids):
            raise ValueError("face ids must be unique")
        for f in self.faces:
            p = f.points()
            area = 0.5 * np.linalg.norm(np.cross(p[1] - p[0], p[2] - p[0]))
            if area < 1e-9:
                raise ValueError(f"face {f.face_id}: degenerate marker triangle")
            d = np.sort(f.edge_lengths())
            if np.min(np.diff(d)) < 1e-6:
                raise ValueError(f"face {f.face_id}: marker triangle must be asymmetric")
        sigs = [f.signature() for f in self.faces]
        for i in range(len(sigs)):
            for j in range(i + 1, len(sigs)):
                if np.max(np.abs(sigs[i] - sigs[j])) < 1e-6:
                    raise ValueError(
                        f"faces {self.faces[i].face_id} and {self.faces[j].face_id} share a pattern"
                    )
        return self

    def face(self, face_id: int) -> MarkerFace:
        for f in self.faces:
            if f.face_id == face_id:
                return f
        raise KeyError(face_id)


# --------------------
# Estimation / guidance configuration
# --------------------
class FilterConfig(StrictModel):
    accel_sigma_mps2: float = Field(0.05 * STANDARD_GRAVITY, gt=0)
    uwb_sigma_m: float = Field(0.08, gt=0)
    vision_cov_diag: Tuple[float, float, float] = (0.001, 0.001, 0.00225)
    process_accel_var: Tuple[float, float] = (8e-4, 8e-4)
    gate_range: float = Field(15.14, gt=0)
    gate_vector: float = Field(18.42, gt=0)
    gating_enabled: bool = True
    accel_updates_enabled: bool = True
    underweight_factor: float = Field(4.0, ge=1.0)
    underweight_updates: int = Field(5, ge=0)
    underweight_gap_s: float = Field(0.5, gt=0)
    initial_cov_diag: Tuple[float, float, float, float] = (0.25, 0.25, 0.01, 0.01)
    # trilateration anchors whose residual exceeds this are dropped from the first fix
    init_residual_m: float = Field(0.15, gt=0)
    # consecutive gated-out ranges before the position covariance is reset
    lockout_rejections: int = Field(12, ge=1)

    @field_validator("vision_cov_diag", "process_accel_var", "initial_cov_diag")
    @classmethod
    def _positive(cls, v):
        if any(x <= 0 for x in v):
            raise ValueError("covariance entries must be positive")
        return v


class VisionConfig(StrictModel):
    enabled: bool = True
    att_process_var: float = Field(1e-7, gt=0)
    accel_process_var: float = Field(1e-6, gt=0)
    init_att_var: float = Field(1e-4, gt=0)
    init_pos_var: float = Field(2.5e-5, gt=0)
    init_vel_var: float = Field(1e-4, gt=0)
    feature_sigma_px: float = Field(0.5, gt=0)
    converge_3sigma_m: float = Field(0.005, gt=0)
    p3p_residual_tol: float = Field(1e-4, gt=0)
    face_tolerance: float = Field(0.05, gt=0)
    prior_translation_weight: float = Field(1.0, ge=0)
    prior_max_angle_rad: float = Field(0.3, gt=0)
    # consecutive heading-gated fixes before the filter is dropped and re-solved
    heading_reject_limit: int = Field(20, ge=1)


Mission = Literal["waypoint", "docking", "profile"]


class GuidanceConfig(StrictModel):
    settle_trace_m2: float = Field(0.01, gt=0)
    settle_min_ranges: int = Field(50, ge=0)
    los_deadband_rad: float = Field(0.05, gt=0)
    los_rate_tol_radps: float = Field(0.05, gt=0)
    handover_radius_m: float = Field(0.10, gt=0)
    dock_radius_m: float = Field(0.015, gt=0)
    dock_speed_mps: float = Field(0.01, gt=0)
    align_cross_track_m: float = Field(0.01, gt=0)
    align_heading_rad: float = Field(math.radians(5.0), gt=0)
    heading_kp: float = Field(0.02, gt=0)
    heading_kd: float = Field(0.02, gt=0)
    pos_kp: float = Field(0.15, gt=0)
    pos_kd: float = Field(0.5, gt=0)
    final_kp: float = Field(0.05, gt=0)
    final_kd: float = Field(0.3, gt=0)
    terminal_timeout_s: float = Field(10.0, gt=0)
    cov_ceiling_m2: float = Field(1.0, gt=0)
    mobile_target: bool = False

    @model_validator(mode="after")
    def _radii(self) -> "GuidanceConfig":
        if self.handover_radius_m <= self.dock_radius_m:
            raise ValueError("handover_radius_m must exceed dock_radius_m")
        return self


# --------------------
# Scenario
# --------------------
class RatesConfig(StrictModel):
    sim_hz: int = Field(1000, gt=0)
    imu_hz: int = Field(100, gt=0)
    uwb_hz: int = Field(50, gt=0)
    vision_hz: int = Field(20, gt=0)
    truth_log_hz: int = Field(120, gt=0)
    command_hz: int = Field(20, gt=0)
    uwb_jitter_s: float = Field(0.0, ge=0)

    @model_validator(mode="after")
    def _below_sim_rate(self) -> "RatesConfig":
        for name in ("imu_hz", "uwb_hz", "vision_hz", "truth_log_hz", "command_hz"):
            if getattr(self, name) > self.sim_hz:
                raise ValueError(f"{name} exceeds sim_hz")
        if self.uwb_jitter_s >= 1.0 / self.imu_hz:
            raise ValueError("uwb_jitter_s must be shorter than one IMU interval")
        return self


class TargetConfig(StrictModel):
    x_m: float = 2.0
    y_m: float = 1.5
    psi_rad: float = 0.0
    module_standoff_m: float = Field(0.15, gt=0)
    # drift of the whole target when guidance.mobile_target is set
    velocity_mps: Tuple[float, float] = (0.0, 0.0)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x_m, self.y_m])


class InitialConfig(StrictModel):
    x_m: float = 0.5
    y_m: float = 0.5
    psi_rad: float = 0.0
    u_mps: float = 0.0
    v_mps: float = 0.0
    omega_radps: float = 0.0
    region_min_m: Tuple[float, float] = (0.5, 0.5)
    region_max_m: Tuple[float, float] = (2.5, 2.5)
    randomize_heading: bool = True


class ProfileConfig(StrictModel):
    segment_s: float = Field(4.0, gt=0)
    duty: float = Field(0.5, ge=0, le=1)


class Scenario(StrictModel):
    name: str = "scenario"
    mission: Mission = "waypoint"
    duration_s: float = Field(60.0, gt=0)
    seed: int = 0
    rates: RatesConfig = Field(default_factory=RatesConfig)
    module: ModuleParams = Field(default_factory=ModuleParams)
    anchors: AnchorSet = Field(default_factory=AnchorSet)
    markers: MarkerSet = Field(default_factory=MarkerSet)
    camera: CameraIntrinsics = Field(default_factory=CameraIntrinsics)
    mount: CameraMount = Field(default_factory=CameraMount)
    target: TargetConfig = Field(default_factory=TargetConfig)
    initial: InitialConfig = Field(default_factory=InitialConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    filter: FilterConfig = Field(default_factory=FilterConfig)
    vision: VisionConfig = Field(default_factory=VisionConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    profile: ProfileConfig = Field(default_factory=ProfileConfig)


# --------------------
# Hot-loop value types
# --------------------
@dataclass(frozen=True)
class BodyState:
    x: float
    y: float
    psi: float
    u: float = 0.0  # body velocity along body x
    v: float = 0.0  # body velocity along body y
    omega: float = 0.0

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])

    @property
    def body_velocity(self) -> np.ndarray:
        return np.array([self.u, self.v])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.psi), math.sin(self.psi)
        return np.array([[c, -s], [s, c]])

    def as_tuple(self) -> Tuple[float, ...]:
        return (self.x, self.y, self.psi, self.u, self.v, self.omega)


@dataclass(frozen=True)
class ThrusterCommand:
    duties: Tuple[float, ...]
    mask: Optional[Tuple[bool, ...]] = None

    def __post_init__(self):
        for d in self.duties:
            if not (0.0 <= d <= 1.0):
                raise ValueError(f"duty {d} outside [0, 1]")
        if self.mask is not None and len(self.mask) != len(self.duties):
            raise ValueError("mask length must match duties")

    @classmethod
    def zero(cls, n: int = 4) -> "ThrusterCommand":
        return cls(duties=(0.0,) * n)

    def active(self, i: int) -> bool:
        return self.mask is None or bool(self.mask[i])


@dataclass(frozen=True)
class BodyWrench:
    fx: float
    fy: float
    tau: float

    @property
    def force(self) -> np.ndarray:
        return np.array([self.fx, self.fy])


@dataclass(frozen=True)
class RangeMeasurement:
    anchor_id: int
    range_m: float
    stamp: float
    # simulation labels, never read by the filter
    outlier_component: bool = False
    gross_outlier: bool = False


@dataclass(frozen=True)
class FeatureObservation:
    u: float  # rectified
    v: float
    stamp: float
    marker_id: Optional[Tuple[int, int]] = None  # (face, marker) label from the simulator


@dataclass(frozen=True)
class Pose3:
    """Rigid transform: maps frame-local points into the parent frame (p_parent = R p + t)."""

    R: np.ndarray
    t: np.ndarray

    def apply(self, p: np.ndarray) -> np.ndarray:
        return p @ self.R.T + self.t if p.ndim == 2 else self.R @ p + self.t

    def inverse(self) -> "Pose3":
        return Pose3(self.R.T, -self.R.T @ self.t)

    def compose(self, other: "Pose3") -> "Pose3":
        return Pose3(self.R @ other.R, self.R @ other.t + self.t)


@dataclass(frozen=True)
class PlanarPose:
    x: float
    y: float
    psi: float
    cov: np.ndarray = field(default_factory=lambda: np.zeros((3, 3)))
    stamp: float = 0.0


# --------------------
# Run results
# --------------------
class RunMetrics(BaseModel):
    model_config = ConfigDict(ser_json_inf_nan="constants")

    scenario: str
    mission: str
    seed: int
    sim_time_s: float = 0.0
    endpoint_error_m: float = math.nan
    final_estimate_error_m: float = math.nan
    pos_rmse_m: float = math.nan
    vel_rmse_mps: float = math.nan
    uwb_accepted: int = 0
    uwb_rejected: int = 0
    uwb_degenerate: int = 0
    accel_accepted: int = 0
    accel_rejected: int = 0
    vision_accepted: int = 0
    vision_rejected: int = 0
    vision_failures: int = 0
    outliers_processed: int = 0
    outliers_rejected: int = 0
    gross_outliers_processed: int = 0
    gross_outliers_rejected: int = 0
    inliers_processed: int = 0
    inliers_rejected: int = 0
    phase_timeline: List[Tuple[float, str]] = Field(default_factory=list)
    docked: bool = False
    aborted: bool = False
    final_separation_m: float = math.nan
    final_heading_err_rad: float = math.nan
    cov_checks: int = 0
    cov_violations: int = 0
    truth_rows: int = 0
    estimate_rows: int = 0
    measurement_rows: int = 0

    @property
    def gross_rejection_rate(self) -> float:
        return self.gross_outliers_rejected / self.gross_outliers_processed if self.gross_outliers_processed else math.nan

    @property
    def outlier_rejection_rate(self) -> float:
        return self.outliers_rejected / self.outliers_processed if self.outliers_processed else math.nan

    @property
    def inlier_rejection_rate(self) -> float:
        return self.inliers_rejected / self.inliers_processed if self.inliers_processed else math.nan

    def phases(self) -> List[str]:
        return [p for _, p in self.phase_timeline]
