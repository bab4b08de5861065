"""Shared value types and default parameter sets.

Defaults correspond to the bundled six-wheel vehicle configuration (a ~45 t
off-highway truck) and the controller parameter set used throughout the test
suite. All angles are radians and all units SI once inside the library; the
CLI layer converts degree-valued config entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

G_ACCEL = 9.81  # m/s^2

# Control vector layout: u = [delta, T_L1, T_R1, T_L2, T_R2, T_L3, T_R3]
N_WHEELS = 6
N_CONTROLS = 7
IDX_DELTA = 0

# Response vector layout: r = [beta, omega_z, a_y]
N_RESPONSE = 3


@dataclass(frozen=True)
class VehicleParams:
    """Physical vehicle parameters (defaults: bundled truck configuration)."""

    m: float = 45_000.0            # mass, kg
    Iz: float = 3_446_811.0        # yaw inertia, kg m^2
    a: float = 3.155               # CoG -> front axle, m
    b: float = 3.155               # CoG -> rear axle, m
    track: float = 4.147           # track width B, m
    C_beta: float = 1.728e6        # cornering stiffness per wheel, N/rad
    Rw: float = 0.8                # wheel radius, m
    Fz_nom: float = 75_000.0       # nominal vertical load per wheel, N
    h_cog: float = 1.5             # CoG height, m (not in the published table; see docs)
    c_drag: float = 35.0           # quadratic drag, N/(m/s)^2
    K_roll: float = 2.417e6        # roll stiffness proxy, N m/rad (calibrated: ay=5 -> ~8 deg)
    delta_max: float = math.radians(30.0)       # rad
    delta_rate_max: float = math.radians(6.0)   # rad/s
    T_max: float = 135_000.0       # N m per wheel
    T_rate_max: float = 5_000.0    # N m/s per wheel
    dt_control: float = 0.05       # s
    dt_inner: float = 0.005        # s, RK4 sub-step

    @property
    def wheelbase(self) -> float:
        return self.a + self.b

    def wheel_positions(self) -> np.ndarray:
        """(6, 2) wheel positions in body frame, order L1 R1 L2 R2 L3 R3.

        Axles sit at x = +a (front, steered), 0 (middle), -b (rear); y = +/- track/2
        with the left side at +y.
        """
        half = self.track / 2.0
        return np.array(
            [
                [self.a, half], [self.a, -half],
                [0.0, half], [0.0, -half],
                [-self.b, half], [-self.b, -half],
            ]
        )

    def control_lower(self) -> np.ndarray:
        lo = np.full(N_CONTROLS, -self.T_max)
        lo[IDX_DELTA] = -self.delta_max
        return lo

    def control_upper(self) -> np.ndarray:
        return -self.control_lower()

    def rate_limits(self) -> np.ndarray:
        """Per-channel |du/dt| limits."""
        r = np.full(N_CONTROLS, self.T_rate_max)
        r[IDX_DELTA] = self.delta_rate_max
        return r


@dataclass(frozen=True)
class SafetyLimits:
    """Barrier and metric limits (controller parameter table)."""

    beta_lim: float = 0.15                    # rad  (~8.6 deg)
    omega_lim: float = 0.20                   # rad/s (~11.5 deg/s)
    ay_lim: float = 5.0                       # m/s^2
    phi_lim: float = math.radians(20.0)       # rad
    gamma_w: float = 0.3                      # load-scale exponent, in (0, 1/2)
    T_pred: float = 0.1                       # s, optional barrier prediction window
    beta_risk: float = 0.05                   # CVaR risk level
    nu0: float = 50.0                         # inverse-Wishart prior strength
    forget: float = 0.99                      # forgetting factor lambda
    alpha_gain: float = 2.0                   # class-K gain k in alpha(h) = k h, 1/s
    w_floor: float = 0.3                      # load-scale floor for the full variance model


@dataclass(frozen=True)
class ControllerGains:
    """Nominal (tracking) controller gains."""

    k_stanley: float = 0.4
    k_p: float = 10_000.0   # N m per (m/s) of speed error, total across wheels
    k_d: float = 1_000.0    # N m per (m/s^2)


@dataclass(frozen=True)
class SensorNoiseSpec:
    """Per-channel 1-sigma measurement noise levels.

    Defaults sit mid-band of the sensor constraint ranges: sigma_beta 0.5 deg,
    sigma_omega 0.065 deg/s, sigma_ay 0.065 m/s^2, sigma_Fz 10% of nominal load.
    """

    sigma_beta: float = math.radians(0.5)       # rad
    sigma_omega: float = math.radians(0.065)    # rad/s
    sigma_ay: float = 0.065                     # m/s^2
    sigma_Fz: float = 7_500.0                   # N

    def response_sigmas(self) -> np.ndarray:
        return np.array([self.sigma_beta, self.sigma_omega, self.sigma_ay])

    def response_cov(self) -> np.ndarray:
        return np.diag(self.response_sigmas() ** 2)

    def load_cov(self) -> np.ndarray:
        return np.eye(N_WHEELS) * self.sigma_Fz**2

    def normalized_levels(self, limits: SafetyLimits, Fz_nom: float) -> tuple[float, float]:
        """(rho_r, rho_F): limit-normalized noise levels used by config validation.

        rho_r is the 2-norm of the per-channel sigma/limit ratios; rho_F is the
        per-wheel load sigma over the nominal load.
        """
        rho_r = float(
            np.linalg.norm(
                [
                    self.sigma_beta / limits.beta_lim,
                    self.sigma_omega / limits.omega_lim,
                    self.sigma_ay / limits.ay_lim,
                ]
            )
        )
        rho_F = self.sigma_Fz / Fz_nom
        return rho_r, rho_F


@dataclass
class VehicleState:
    """Planar rigid-body state of the truth plant."""

    x: float = 0.0
    y: float = 0.0
    psi: float = 0.0
    vx: float = 10.0
    vy: float = 0.0
    omega_z: float = 0.0

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.vx, self.vy, self.omega_z])

    @classmethod
    def from_array(cls, arr) -> "VehicleState":
        return cls(*(float(v) for v in arr))

    @property
    def beta(self) -> float:
        return math.atan2(self.vy, self.vx)

    def copy(self) -> "VehicleState":
        return replace(self)


@dataclass(frozen=True)
class ControlInput:
    """Steering angle plus six wheel torques."""

    delta: float
    torques: tuple[float, ...] = field(default=(0.0,) * N_WHEELS)

    def as_array(self) -> np.ndarray:
        return np.array([self.delta, *self.torques])

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return cls(float(u[IDX_DELTA]), tuple(float(t) for t in u[1:]))

    @classmethod
    def zero(cls) -> "ControlInput":
        return cls(0.0)


def control_array(u) -> np.ndarray:
    """Coerce a ControlInput or array-like to the length-7 control array."""
    if isinstance(u, ControlInput):
        return u.as_array()
    u = np.asarray(u, dtype=float)
    if u.shape != (N_CONTROLS,):
        raise ValueError(f"control vector must have shape ({N_CONTROLS},), got {u.shape}")
    return u
