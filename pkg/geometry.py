"""Frame, rotation and quaternion helpers shared by the truth models and the onboard code.

Quaternions are scalar-last ``(x, y, z, w)``, matching ``scipy.spatial.transform.Rotation``.
``quat_to_rot(q)`` maps frame-local ("body") vectors into the reference ("world") frame.
"""
from __future__ import annotations

import math
from typing import Callable

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from models import CameraMount, Pose3

TWO_PI = 2.0 * math.pi


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    w = math.remainder(a, TWO_PI)
    if w <= -math.pi:
        w += TWO_PI
    return w


def rot2(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s], [s, c]])


def rotz(psi: float) -> np.ndarray:
    c, s = math.cos(psi), math.sin(psi)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def skew(w: np.ndarray) -> np.ndarray:
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_rot_partials(q: np.ndarray) -> np.ndarray:
    """dR/dq_k for k in (x, y, z, w); shape (4, 3, 3)."""
    x, y, z, w = q
    return 2.0 * np.array(
        [
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
        ],
        dtype=float,
    )


def quat_left_matrix(p: np.ndarray) -> np.ndarray:
    """L(p) with p (x) q == L(p) @ q (Hamilton product, scalar-last)."""
    px, py, pz, pw = p
    return np.array(
        [
            [pw, -pz, py, px],
            [pz, pw, -px, py],
            [-py, px, pw, pz],
            [-px, -py, -pz, pw],
        ]
    )


def rotation_angle(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Geodesic distance between two rotations (rad)."""
    c = 0.5 * (np.trace(Ra.T @ Rb) - 1.0)
    return math.acos(max(-1.0, min(1.0, c)))


def camera_in_body(mount: CameraMount) -> Pose3:
    """Camera frame (z along the optical axis, x right, y down) expressed in the chaser body frame."""
    c, s = math.cos(mount.yaw_rad), math.sin(mount.yaw_rad)
    R = np.column_stack(([s, -c, 0.0], [0.0, 0.0, -1.0], [c, s, 0.0]))
    return Pose3(R, np.array([mount.offset_m[0], mount.offset_m[1], 0.0]))


def planar_pose3(x: float, y: float, psi: float) -> Pose3:
    return Pose3(rotz(psi), np.array([x, y, 0.0]))


def symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def is_spd(P: np.ndarray, sym_tol: float = 1e-9) -> bool:
    if np.max(np.abs(P - P.T)) >= sym_tol:
        return False
    try:
        cholesky(P, lower=True)
    except LinAlgError:
        return False
    return True


def numerical_jacobian(f: Callable[[np.ndarray], np.ndarray], x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of f at x."""
    x = np.asarray(x, dtype=float)
    f0 = np.atleast_1d(f(x))
    J = np.zeros((f0.size, x.size))
    for k in range(x.size):
        h = eps * max(1.0, abs(x[k]))
        xp = x.copy()
        xm = x.copy()
        xp[k] += h
        xm[k] -= h
        J[:, k] = (np.atleast_1d(f(xp)) - np.atleast_1d(f(xm))) / (2.0 * h)
    return J


def jacobian_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(numeric))))
    return float(np.max(np.abs(analytic - numeric))) / scale
