# world/sensors.py
"""Synthetic measurements from ground truth: AHRS (rate, attitude, specific force), UWB ranges, LED features.

Every sampler takes the numpy ``Generator`` it draws from; the harness hands each sensor its own
stream so enabling one sensor never shifts another sensor's noise.
"""
from __future__ import annotations

import math
from typing import List, Optional, Sequence

import numpy as np

from geometry import wrap_angle
from models import (
    AnchorSet,
    BodyState,
    CameraIntrinsics,
    FeatureObservation,
    MarkerSet,
    ModuleParams,
    NoiseConfig,
    Pose3,
    RangeMeasurement,
    ThrusterCommand,
)
from world.dynamics import specific_force, thruster_forces


def sample_gyro(truth: BodyState, cfg: NoiseConfig, rng: np.random.Generator) -> float:
    return truth.omega + cfg.gyro_sigma_radps * rng.standard_normal()


def sample_attitude(truth: BodyState, cfg: NoiseConfig, rng: np.random.Generator) -> float:
    return wrap_angle(truth.psi + cfg.attitude_sigma_rad * rng.standard_normal())


def sample_accel(
    truth: BodyState,
    cmd: ThrusterCommand,
    params: ModuleParams,
    cfg: NoiseConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    a = specific_force(truth, thruster_forces(cmd, params), params)
    return a + cfg.accel_sigma_mps2 * rng.standard_normal(2)


def antenna_position(truth: BodyState, anchors: AnchorSet) -> np.ndarray:
    return truth.position + truth.rotation() @ np.asarray(anchors.antenna_offset_m, dtype=float)


def sample_uwb(
    truth: BodyState,
    anchors: AnchorSet,
    target_pos: Optional[np.ndarray],
    cfg: NoiseConfig,
    rng: np.random.Generator,
    stamp: float = 0.0,
) -> List[RangeMeasurement]:
    """One two-way range per anchor from the Gaussian inlier/outlier mixture.

    Nothing is returned while the module is inside the near-field radius of the target.
    """
    if target_pos is not None and np.linalg.norm(truth.position - target_pos) < cfg.uwb_near_field_m:
        return []
    p = antenna_position(truth, anchors)
    gross_band = cfg.gross_outlier_factor * cfg.uwb_inlier_sigma_m
    out: List[RangeMeasurement] = []
    for i, a in enumerate(anchors.as_array()):
        true_range = float(np.linalg.norm(p - a))
        is_outlier = bool(rng.random() < cfg.uwb_outlier_prob)
        sigma = cfg.uwb_outlier_sigma_m if is_outlier else cfg.uwb_inlier_sigma_m
        err = sigma * rng.standard_normal()
        z = max(0.0, true_range + err)
        out.append(
            RangeMeasurement(
                anchor_id=i,
                range_m=z,
                stamp=stamp,
                outlier_component=is_outlier,
                gross_outlier=is_outlier and abs(z - true_range) > gross_band,
            )
        )
    return out


def rectify(u_px: float, v_px: float, intr: CameraIntrinsics) -> tuple:
    return (u_px - intr.u0_px) / intr.fx_px, (v_px - intr.v0_px) / intr.fy_px


def to_pixels(u: float, v: float, intr: CameraIntrinsics) -> tuple:
    return u * intr.fx_px + intr.u0_px, v * intr.fy_px + intr.v0_px


def rectified_sigma(cfg: NoiseConfig, intr: CameraIntrinsics) -> float:
    return cfg.feature_sigma_px / math.sqrt(intr.fx_px * intr.fy_px)


def project_point(p_cam: np.ndarray) -> Optional[tuple]:
    """Pinhole projection to rectified coordinates; None for non-positive depth."""
    if p_cam[2] <= 0.0:
        return None
    return p_cam[0] / p_cam[2], p_cam[1] / p_cam[2]


def project_features(
    camera_pose: Pose3,
    target_pose: Pose3,
    markers: MarkerSet,
    intr: CameraIntrinsics,
    cfg: NoiseConfig,
    rng: np.random.Generator,
    stamp: float = 0.0,
    faces: Optional[Sequence[int]] = None,
) -> List[FeatureObservation]:
    """Rectified LED features visible to the camera.

    Both poses map frame-local points into the world. Back-facing faces are culled and markers
    behind the camera are omitted.
    """
    sigma = rectified_sigma(cfg, intr)
    cam_from_world = camera_pose.inverse()
    cam_origin_w = camera_pose.t
    out: List[FeatureObservation] = []
    for face in markers.faces:
        if faces is not None and face.face_id not in faces:
            continue
        pts_w = target_pose.apply(face.points())
        normal_w = target_pose.R @ np.asarray(face.normal, dtype=float)
        if float(normal_w @ (cam_origin_w - pts_w.mean(axis=0))) <= 0.0:
            continue
        for k, p_w in enumerate(pts_w):
            uv = project_point(cam_from_world.apply(p_w))
            if uv is None:
                continue
            noise = sigma * rng.standard_normal(2)
            out.append(
                FeatureObservation(
                    u=uv[0] + noise[0],
                    v=uv[1] + noise[1],
                    stamp=stamp,
                    marker_id=(face.face_id, k),
                )
            )
    return out
