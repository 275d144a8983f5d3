# world/dynamics.py
"""Planar rigid-body truth propagation under nozzle thrust, torque and ball-transfer friction."""
from __future__ import annotations

import math
from typing import Tuple

import numpy as np
from scipy.linalg import null_space
from scipy.optimize import nnls

from geometry import wrap_angle
from models import BodyState, BodyWrench, ModuleParams, ThrusterCommand

_State = Tuple[float, float, float, float, float, float]


def allocation_matrix(params: ModuleParams) -> np.ndarray:
    """Wrench produced per unit duty: columns (fx, fy, tau) for each nozzle."""
    F = params.nozzle_thrust_n
    d = params.nozzle_arm_m
    cols = [
        (F * n.direction[0], F * n.direction[1], F * d * n.arm_sign) for n in params.nozzles
    ]
    return np.array(cols, dtype=float).T


def thruster_forces(cmd: ThrusterCommand, params: ModuleParams) -> BodyWrench:
    if len(cmd.duties) != params.n_nozzles:
        raise ValueError(f"expected {params.n_nozzles} duties, got {len(cmd.duties)}")
    F = params.nozzle_thrust_n
    d = params.nozzle_arm_m
    fx = fy = tau = 0.0
    for i, (duty, nozzle) in enumerate(zip(cmd.duties, params.nozzles)):
        if not cmd.active(i) or duty == 0.0:
            continue
        f = duty * F
        fx += f * nozzle.direction[0]
        fy += f * nozzle.direction[1]
        tau += f * d * nozzle.arm_sign
    return BodyWrench(fx, fy, tau)


def allocate(wrench: BodyWrench, params: ModuleParams) -> ThrusterCommand:
    """Inverse of thruster_forces: minimum total duty reproducing the wrench, saturated to [0, 1].

    Saturation scales the whole duty vector so the wrench direction is kept.
    """
    B = allocation_matrix(params)
    w = np.array([wrench.fx, wrench.fy, wrench.tau])
    if not np.any(w):
        return ThrusterCommand.zero(params.n_nozzles)
    alpha = np.linalg.pinv(B) @ w
    ns = null_space(B)
    if ns.shape[1] == 1 and (np.all(ns[:, 0] > 0) or np.all(ns[:, 0] < 0)):
        n = np.abs(ns[:, 0])
        alpha = alpha - np.min(alpha / n) * n
    else:
        alpha, _ = nnls(B, w)
    alpha = np.clip(alpha, 0.0, None)
    peak = float(np.max(alpha))
    if peak > 1.0:
        alpha = alpha / peak
    return ThrusterCommand(duties=tuple(float(a) for a in np.clip(alpha, 0.0, 1.0)))


def friction_force(state: BodyState, params: ModuleParams) -> np.ndarray:
    k = -params.friction_mu * params.mass_kg * params.gravity_mps2
    return np.array([k * state.u, k * state.v])


def friction_torque(state: BodyState, params: ModuleParams) -> float:
    return -params.rot_damping_nms * state.omega


def specific_force(state: BodyState, wrench: BodyWrench, params: ModuleParams) -> np.ndarray:
    """Body-frame specific force sensed by the accelerometer (thrust plus friction over mass)."""
    mg = params.friction_mu * params.gravity_mps2
    return np.array(
        [wrench.fx / params.mass_kg - mg * state.u, wrench.fy / params.mass_kg - mg * state.v]
    )


def _derivative(s: _State, fx: float, fy: float, tau: float, params: ModuleParams) -> _State:
    _, _, psi, u, v, w = s
    c, sn = math.cos(psi), math.sin(psi)
    mug = params.friction_mu * params.gravity_mps2
    m = params.mass_kg
    # rho_dot = f/m - mu*g*rho - omega x rho
    return (
        c * u - sn * v,
        sn * u + c * v,
        w,
        fx / m - mug * u + w * v,
        fy / m - mug * v - w * u,
        (tau - params.rot_damping_nms * w) / params.inertia_kgm2,
    )


def _axpy(a: float, k: _State, s: _State) -> _State:
    return tuple(si + a * ki for si, ki in zip(s, k))  # type: ignore[return-value]


def step(state: BodyState, cmd: ThrusterCommand, params: ModuleParams, dt: float) -> BodyState:
    """One fixed-step RK4 update with the thruster command held over the step."""
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    wrench = thruster_forces(cmd, params)
    return _rk4(state, wrench, params, dt)


def _rk4(state: BodyState, wrench: BodyWrench, params: ModuleParams, dt: float) -> BodyState:
    fx, fy, tau = wrench.fx, wrench.fy, wrench.tau
    s0 = state.as_tuple()
    k1 = _derivative(s0, fx, fy, tau, params)
    k2 = _derivative(_axpy(0.5 * dt, k1, s0), fx, fy, tau, params)
    k3 = _derivative(_axpy(0.5 * dt, k2, s0), fx, fy, tau, params)
    k4 = _derivative(_axpy(dt, k3, s0), fx, fy, tau, params)
    out = [
        s0[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]) for i in range(6)
    ]
    return BodyState(out[0], out[1], wrap_angle(out[2]), out[3], out[4], out[5])


def kinetic_energy(state: BodyState, params: ModuleParams) -> float:
    return 0.5 * params.mass_kg * (state.u ** 2 + state.v ** 2) + 0.5 * params.inertia_kgm2 * state.omega ** 2
