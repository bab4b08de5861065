"""Nominal lateral-response model of the six-wheel platform.

Works in the reduced response vector r = [beta, omega_z, a_y] at (quasi-)
constant forward speed vx, with the 7-channel input u = [delta, T_L1, T_R1,
T_L2, T_R2, T_L3, T_R3]. Only the front axle steers.

Axle convention: the single-track reduction lumps the two wheels of an axle,
so the front cornering stiffness seen by the sideslip dynamics is
C_front = 2 * C_beta (per-wheel) and the total over all three axles is
Sigma_C = 6 * C_beta. Axle stiffnesses scale with measured axle load over
nominal, which is what makes the load Jacobian jac_F nonzero.

`control_matrix` returns the published small-angle input-sensitivity matrix G
(a fixed reference artifact, including its sign conventions); the simulation
path uses the physically signed `NominalModel` below, which reduces to the
same sideslip row magnitudes at nominal load.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SpeedDomain
from .params import (
    IDX_DELTA,
    N_CONTROLS,
    N_RESPONSE,
    N_WHEELS,
    VehicleParams,
    control_array,
)

# Single-track lumping factors (wheels per axle / per vehicle).
C_FRONT_FACTOR = 2.0
C_TOTAL_FACTOR = 6.0

# Left/right torque signature: +1 for right-side wheels (yaw moment to the
# left), -1 for left-side, matching the u layout [T_L1, T_R1, T_L2, ...].
TORQUE_SIGNS = np.array([-1.0, 1.0, -1.0, 1.0, -1.0, 1.0])


def _check_speed(vx: float) -> float:
    vx = float(vx)
    if vx <= 0.0:
        raise SpeedDomain(f"forward speed must be positive, got {vx}")
    return vx


def control_matrix(vx: float, params: VehicleParams) -> np.ndarray:
    """Reference small-angle input sensitivity G (3x7) at speed vx.

    Row 1: sideslip rate; row 2: yaw acceleration; row 3: lateral jerk.
    Torque gain k = track / (2 * Iz * Rw); steering entries use the published
    signs (negative first column).
    """
    vx = _check_speed(vx)
    m, Iz = params.m, params.Iz
    C, a, b = params.C_beta, params.a, params.b
    k = params.track / (2.0 * Iz * params.Rw)
    G = np.zeros((N_RESPONSE, N_CONTROLS))
    G[0, 0] = -4.0 * C / (m * vx)
    G[1, 0] = -2.0 * (a + b) * C / Iz
    G[2, 0] = -4.0 * C / m - 2.0 * (a + b) * C * vx / Iz
    G[1, 1:] = k * TORQUE_SIGNS
    G[2, 1:] = k * vx * TORQUE_SIGNS
    return G


def dump_control_matrix_csv(path, vx: float, params: VehicleParams) -> None:
    """Write G to a CSV file (one row per response channel)."""
    G = control_matrix(vx, params)
    header = "delta,T_L1,T_R1,T_L2,T_R2,T_L3,T_R3"
    np.savetxt(path, G, delimiter=",", header=header, comments="# ")


@dataclass(frozen=True)
class BarrierLinearization:
    """Affine model of the barrier rate: hdot ~= L_h @ u + b_h.

    grad_Lh (3x7) and grad_bh (3,) are gradients w.r.t. the response vector,
    used to propagate response-measurement noise into the constraint row.
    """

    L_h: np.ndarray
    b_h: float
    grad_Lh: np.ndarray
    grad_bh: np.ndarray


class NominalModel:
    """Load-aware single-track response model bound to (params, vx)."""

    def __init__(self, params: VehicleParams, vx: float):
        self.params = params
        self.vx = _check_speed(vx)
        p = params
        self._k_t = p.track / (2.0 * p.Iz * p.Rw)          # tau -> yaw accel
        self._m_moment = p.track / (2.0 * p.Rw)            # tau -> yaw moment
        self._c_front_nom = C_FRONT_FACTOR * p.C_beta
        self._c_total_nom = C_TOTAL_FACTOR * p.C_beta
        self._nominal_Fz = np.full(N_WHEELS, p.Fz_nom)

    # -- load-dependent stiffness -------------------------------------------

    def axle_stiffness(self, Fz) -> tuple[float, float, float]:
        """(c_front, c_mid, c_rear): per-axle stiffness scaled by load/nominal."""
        Fz = np.asarray(Fz, dtype=float)
        s = self.params.C_beta / self.params.Fz_nom
        return (
            s * (Fz[0] + Fz[1]),
            s * (Fz[2] + Fz[3]),
            s * (Fz[4] + Fz[5]),
        )

    def _resolve_Fz(self, Fz) -> np.ndarray:
        if Fz is None:
            return self._nominal_Fz
        return np.asarray(Fz, dtype=float)

    # -- response derivative f(r, u, Fz) -------------------------------------

    def f(self, r, u, Fz=None) -> np.ndarray:
        """Response derivative [beta_dot, omega_dot, ay_dot]."""
        r = np.asarray(r, dtype=float)
        u = control_array(u)
        Fz = self._resolve_Fz(Fz)
        p, vx = self.params, self.vx
        beta, omega, ay = r
        delta = u[IDX_DELTA]
        c_f, c_m, c_r = self.axle_stiffness(Fz)

        # Axle slip angles (small-angle); front includes the steer offset.
        s_f = beta + p.a * omega / vx - delta
        s_m = beta
        s_r = beta - p.b * omega / vx
        Y_f, Y_m, Y_r = -c_f * s_f, -c_m * s_m, -c_r * s_r

        M_t = self._m_moment * float(TORQUE_SIGNS @ u[1:])
        beta_dot = (Y_f + Y_m + Y_r) / (p.m * vx) - omega
        omega_dot = (p.a * Y_f - p.b * Y_r + M_t) / p.Iz
        q = (c_f * p.a - c_r * p.b) / (p.m * vx)
        ay_dot = -((c_f + c_m + c_r) / p.m) * (ay / vx - omega) - q * omega_dot
        return np.array([beta_dot, omega_dot, ay_dot])

    def drift(self, r, Fz=None) -> np.ndarray:
        return self.f(r, np.zeros(N_CONTROLS), Fz)

    def input_matrix(self, Fz=None) -> np.ndarray:
        """B = df/du (3x7), physically signed (positive steer gain on beta)."""
        Fz = self._resolve_Fz(Fz)
        p, vx = self.params, self.vx
        c_f, c_m, c_r = self.axle_stiffness(Fz)
        B = np.zeros((N_RESPONSE, N_CONTROLS))
        B[0, 0] = c_f / (p.m * vx)
        B[1, 0] = p.a * c_f / p.Iz
        B[1, 1:] = self._k_t * TORQUE_SIGNS
        q = (c_f * p.a - c_r * p.b) / (p.m * vx)
        B[2, :] = -q * B[1, :]
        return B

    # -- analytic Jacobians ---------------------------------------------------

    def jac_r(self, r, u, Fz=None) -> np.ndarray:
        """df/dr (3x3)."""
        Fz = self._resolve_Fz(Fz)
        p, vx = self.params, self.vx
        c_f, c_m, c_r = self.axle_stiffness(Fz)
        c_sum = c_f + c_m + c_r
        J = np.zeros((N_RESPONSE, N_RESPONSE))
        J[0, 0] = -c_sum / (p.m * vx)
        J[0, 1] = (-c_f * p.a + c_r * p.b) / (p.m * vx * vx) - 1.0
        J[1, 0] = (-p.a * c_f + p.b * c_r) / p.Iz
        J[1, 1] = -(p.a * p.a * c_f + p.b * p.b * c_r) / (p.Iz * vx)
        q = (c_f * p.a - c_r * p.b) / (p.m * vx)
        J[2, 0] = -q * J[1, 0]
        J[2, 1] = c_sum / p.m - q * J[1, 1]
        J[2, 2] = -c_sum / (p.m * vx)
        return J

    def jac_F(self, r, u, Fz=None) -> np.ndarray:
        """df/dFz (3x6) through the load-scaled axle stiffnesses."""
        r = np.asarray(r, dtype=float)
        u = control_array(u)
        Fz = self._resolve_Fz(Fz)
        p, vx = self.params, self.vx
        beta, omega, ay = r
        delta = u[IDX_DELTA]
        c_f, c_m, c_r = self.axle_stiffness(Fz)
        dc = p.C_beta / p.Fz_nom   # dc_axle/dFz_wheel

        s_f = beta + p.a * omega / vx - delta
        s_m = beta
        s_r = beta - p.b * omega / vx
        q = (c_f * p.a - c_r * p.b) / (p.m * vx)
        # Per-axle sensitivities of each response row to that axle's stiffness.
        dbeta_dc = np.array([-s_f, -s_m, -s_r]) / (p.m * vx)
        domega_dc = np.array([-p.a * s_f, 0.0, p.b * s_r]) / p.Iz
        omega_dot = self.f(r, u, Fz)[1]
        dq_dc = np.array([p.a, 0.0, -p.b]) / (p.m * vx)
        day_dc = (
            -(ay / vx - omega) / p.m * np.ones(3)
            - dq_dc * omega_dot
            - q * domega_dc
        )
        per_axle = np.vstack([dbeta_dc, domega_dc, day_dc])   # 3 x 3 (axles)
        # Spread each axle column over its two wheels.
        J = np.zeros((N_RESPONSE, N_WHEELS))
        for ax in range(3):
            J[:, 2 * ax] = per_axle[:, ax] * dc
            J[:, 2 * ax + 1] = per_axle[:, ax] * dc
        return J


def nominal_drift(r, vx: float, params: VehicleParams) -> np.ndarray:
    """Drift of the response model at nominal loads (convenience wrapper)."""
    return NominalModel(params, vx).drift(r)


def effective_sideslip(r, vx: float, params: VehicleParams, T_pred: float) -> float:
    """Short-horizon sideslip prediction beta + T_pred * beta_dot (drift only)."""
    r = np.asarray(r, dtype=float)
    return float(r[0] + T_pred * nominal_drift(r, vx, params)[0])


def linearize_barrier(r_meas, w: float, vx: float, params: VehicleParams) -> BarrierLinearization:
    """Affine-in-u barrier rate hdot = L_h @ u + b_h at the measured response.

    Uses the nominal-load sideslip dynamics
        beta_dot = -omega - (Sigma_C/(m vx)) beta + (C_front/(m vx)) delta
    through hdot = -2 w^2 beta * beta_dot. Only the steering channel enters
    L_h; drive torques act on sideslip only through load transfer, which the
    nominal model ignores.
    """
    vx = _check_speed(vx)
    r = np.asarray(r_meas, dtype=float)
    beta, omega = float(r[0]), float(r[1])
    m = params.m
    c_front = C_FRONT_FACTOR * params.C_beta
    c_total = C_TOTAL_FACTOR * params.C_beta
    w2 = w * w

    L_h = np.zeros(N_CONTROLS)
    L_h[IDX_DELTA] = -2.0 * w2 * beta * c_front / (m * vx)
    beta_dot_drift = -omega - (c_total / (m * vx)) * beta
    b_h = -2.0 * w2 * beta * beta_dot_drift

    grad_Lh = np.zeros((N_RESPONSE, N_CONTROLS))
    grad_Lh[:, IDX_DELTA] = -(2.0 * c_front / (m * vx)) * np.array([w2, 0.0, 0.0])
    grad_bh = np.array(
        [
            2.0 * w2 * omega + 4.0 * w2 * (c_total / (m * vx)) * beta,
            2.0 * w2 * beta,
            0.0,
        ]
    )
    return BarrierLinearization(L_h=L_h, b_h=float(b_h), grad_Lh=grad_Lh, grad_bh=grad_bh)
