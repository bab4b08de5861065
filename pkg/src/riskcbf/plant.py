"""Ground-truth planar six-wheel vehicle simulator.

Rigid-body yaw-plane dynamics with per-wheel linear-then-saturated tires
(hard friction-circle clip at mu * Fz), quasi-static vertical load transfer,
a spatially varying adhesion field, quadratic drag, and the sensor model that
produces the noisy response/load measurements the controller consumes.

Integration is fixed-step RK4 at the inner step (default 5 ms) with the
control input held zero-order over each call; stiff yaw dynamics at low mu
destabilize forward Euler at the 50 ms control period.

Load handling: `estimate_loads` is the plain quasi-static formula

    Fz_i = m g / 6 - sign(y_i) * m a_y h_cog / track
                   - (x_i / L_wb) * m a_x h_cog / L_wb

(the longitudinal lever x_i / L_wb is dimensionless; for this symmetric axle
layout the resulting per-wheel transfer reproduces the classic two-axle value
m a_x h / (2 L_wb) and balances the pitch moment exactly)

whose transfer terms cancel pairwise (the bundled symmetric axle layout has
sum x_i = 0), so the total is exactly m g. Outer wheels gain load in a turn
(a_y > 0 means a left turn; the right side, y_i < 0, loads up). The truth
plant clamps its internal loads at LOAD_FLOOR to represent wheel lift; inside
the dynamics the lateral acceleration entering the transfer term is the
steady-state vx*omega_z (using the full force-balance value would be
circular), while measurements use the force-balance (IMU-consistent) value.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import PlantStall, ScenarioDomain
from .params import (
    G_ACCEL,
    N_WHEELS,
    SensorNoiseSpec,
    VehicleParams,
    VehicleState,
    control_array,
)

LOAD_FLOOR = 100.0        # N, truth-plant clamp representing wheel lift
MU_KINDS = ("uniform", "sinusoid-band", "seeded-random-patch")


class MuField:
    """Spatially varying road adhesion mu(x, y), deterministic per seed.

    kinds:
      uniform             -- constant mu everywhere
      sinusoid-band       -- smooth along-track band between the bounds
      seeded-random-patch -- piecewise-constant 5 m patches, seeded RNG
    """

    def __init__(self, kind: str, mu_lo: float, mu_hi: float, seed: int = 0,
                 patch_len: float = 5.0, wavelength: float = 40.0):
        if kind not in MU_KINDS:
            raise ScenarioDomain(f"unknown mu-field kind {kind!r}, expected one of {MU_KINDS}")
        if not (0.0 < mu_lo <= mu_hi):
            raise ScenarioDomain(f"need 0 < mu_lo <= mu_hi, got [{mu_lo}, {mu_hi}]")
        self.kind = kind
        self.mu_lo = float(mu_lo)
        self.mu_hi = float(mu_hi)
        self.seed = int(seed)
        self.patch_len = float(patch_len)
        self.wavelength = float(wavelength)
        self._patch_cache: dict[int, float] = {}

    @classmethod
    def uniform(cls, mu: float) -> "MuField":
        return cls("uniform", mu, mu)

    @classmethod
    def sinusoid_band(cls, mu_lo: float, mu_hi: float, wavelength: float = 40.0) -> "MuField":
        return cls("sinusoid-band", mu_lo, mu_hi, wavelength=wavelength)

    @classmethod
    def seeded_patches(cls, mu_lo: float, mu_hi: float, seed: int,
                       patch_len: float = 5.0) -> "MuField":
        return cls("seeded-random-patch", mu_lo, mu_hi, seed=seed, patch_len=patch_len)

    def _patch_value(self, idx: int) -> float:
        v = self._patch_cache.get(idx)
        if v is None:
            # Independent seeded draw per patch; offset keeps the seed
            # sequence entries non-negative for positions down to -50 km.
            rng = np.random.default_rng([self.seed, idx + 10_000])
            v = float(rng.uniform(self.mu_lo, self.mu_hi))
            self._patch_cache[idx] = v
        return v

    def mu_at(self, x: float, y: float) -> float:
        if self.kind == "uniform":
            return self.mu_lo
        if self.kind == "sinusoid-band":
            mid = 0.5 * (self.mu_lo + self.mu_hi)
            amp = 0.5 * (self.mu_hi - self.mu_lo)
            return mid + amp * math.sin(2.0 * math.pi * x / self.wavelength)
        return self._patch_value(int(math.floor(x / self.patch_len)))


def estimate_loads(ax: float, ay: float, params: VehicleParams) -> np.ndarray:
    """Quasi-static vertical loads (N) from measured accelerations; sums to m g."""
    pos = params.wheel_positions()
    static = params.m * G_ACCEL / N_WHEELS
    lat = params.m * ay * params.h_cog / params.track
    lon = params.m * ax * params.h_cog / params.wheelbase
    return static - np.sign(pos[:, 1]) * lat - (pos[:, 0] / params.wheelbase) * lon


def wheel_slip_angles(state: VehicleState, delta: float, params: VehicleParams) -> np.ndarray:
    """Per-wheel slip angle alpha_i = delta_i - atan2(v_yi, v_xi), front axle steered."""
    pos = params.wheel_positions()
    v_xi = state.vx - state.omega_z * pos[:, 1]
    v_yi = state.vy + state.omega_z * pos[:, 0]
    deltas = np.zeros(N_WHEELS)
    deltas[:2] = delta
    return deltas - np.arctan2(v_yi, v_xi)


def tire_forces(state: VehicleState, u, Fz, mu_local, params: VehicleParams):
    """Per-wheel wheel-frame forces (Fx, Fy) with a hard friction-circle cap.

    Fx = T/Rw (no wheel-spin DOF) clipped to the circle; Fy = C_beta * alpha
    saturates against whatever the circle has left, sqrt((mu Fz)^2 - Fx^2).
    Longitudinal demand takes priority: a wheel driven (or braked) at the
    grip limit transmits no side force, which is what makes the truth plant
    spin-capable when tracking torque floors the drive on slick ground.
    """
    u = control_array(u)
    Fz = np.asarray(Fz, dtype=float)
    mu = np.broadcast_to(np.asarray(mu_local, dtype=float), (N_WHEELS,))
    alpha = wheel_slip_angles(state, u[0], params)
    cap = mu * Fz
    Fx = np.clip(u[1:] / params.Rw, -cap, cap)
    fy_room = np.sqrt(np.maximum(cap * cap - Fx * Fx, 0.0))
    Fy = np.clip(params.C_beta * alpha, -fy_room, fy_room)
    return Fx, Fy


def _local_mu(x: float, y: float, psi: float, mu_field: MuField,
              params: VehicleParams) -> np.ndarray:
    pos = params.wheel_positions()
    cp, sp = math.cos(psi), math.sin(psi)
    wx = x + pos[:, 0] * cp - pos[:, 1] * sp
    wy = y + pos[:, 0] * sp + pos[:, 1] * cp
    return np.array([mu_field.mu_at(wx[i], wy[i]) for i in range(N_WHEELS)])


def _plant_loads(state: VehicleState, u, mu: np.ndarray,
                 params: VehicleParams) -> np.ndarray:
    """Internal truth loads: quasi-static transfer from pre-force acceleration
    estimates (a_y ~ vx omega, a_x from tire forces), clamped at LOAD_FLOOR.

    a_x comes from the grip-clipped longitudinal forces, not the raw torque
    demand: torque the tires cannot transmit does not pitch the body. One
    fixed-point pass (caps from transfer-free loads, then transfer from the
    clipped forces) is enough because the cap shift only matters when the
    wheel is floored, where the clipped force equals the cap anyway.
    """
    ay_qs = state.vx * state.omega_z
    drag = params.c_drag * state.vx * abs(state.vx)
    cap0 = mu * np.clip(estimate_loads(0.0, ay_qs, params), LOAD_FLOOR, None)
    fx = np.clip(u[1:] / params.Rw, -cap0, cap0)
    ax_qs = (fx.sum() - drag) / params.m
    return np.clip(estimate_loads(ax_qs, ay_qs, params), LOAD_FLOOR, None)


def _body_forces(state: VehicleState, u, params: VehicleParams, mu_field: MuField):
    """Body-frame per-wheel forces and wheel positions at the current state."""
    u = control_array(u)
    mu = _local_mu(state.x, state.y, state.psi, mu_field, params)
    Fz = _plant_loads(state, u, mu, params)
    Fxw, Fyw = tire_forces(state, u, Fz, mu, params)
    cd, sd = math.cos(u[0]), math.sin(u[0])
    rot_c = np.ones(N_WHEELS)
    rot_s = np.zeros(N_WHEELS)
    rot_c[:2], rot_s[:2] = cd, sd
    Fxb = Fxw * rot_c - Fyw * rot_s
    Fyb = Fxw * rot_s + Fyw * rot_c
    return params.wheel_positions(), Fxb, Fyb


def _derivative(s: np.ndarray, u, params: VehicleParams, mu_field: MuField) -> np.ndarray:
    state = VehicleState.from_array(s)
    pos, Fxb, Fyb = _body_forces(state, u, params, mu_field)
    drag = params.c_drag * state.vx * abs(state.vx)
    ax_f = (Fxb.sum() - drag) / params.m
    ay_f = Fyb.sum() / params.m
    tau = float(np.sum(pos[:, 0] * Fyb - pos[:, 1] * Fxb))
    cp, sp = math.cos(state.psi), math.sin(state.psi)
    return np.array(
        [
            state.vx * cp - state.vy * sp,
            state.vx * sp + state.vy * cp,
            state.omega_z,
            ax_f + state.omega_z * state.vy,
            ay_f - state.omega_z * state.vx,
            tau / params.Iz,
        ]
    )


def step_plant(state: VehicleState, u, params: VehicleParams, mu_field: MuField,
               dt: float) -> VehicleState:
    """Advance the truth plant by dt (RK4 sub-stepping, u held constant)."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    u = control_array(u)
    n_sub = max(1, int(round(dt / params.dt_inner)))
    h = dt / n_sub
    s = state.as_array()
    for _ in range(n_sub):
        k1 = _derivative(s, u, params, mu_field)
        k2 = _derivative(s + 0.5 * h * k1, u, params, mu_field)
        k3 = _derivative(s + 0.5 * h * k2, u, params, mu_field)
        k4 = _derivative(s + h * k3, u, params, mu_field)
        s = s + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if s[3] <= 0.0:
            raise PlantStall(f"forward speed reached {s[3]:.3f} m/s")
    return VehicleState.from_array(s)


def body_accelerations(state: VehicleState, u, params: VehicleParams,
                       mu_field: MuField) -> tuple[float, float]:
    """IMU-consistent specific forces (ax, ay) = (sum Fx - drag, sum Fy)/m."""
    _, Fxb, Fyb = _body_forces(state, u, params, mu_field)
    drag = params.c_drag * state.vx * abs(state.vx)
    return float((Fxb.sum() - drag) / params.m), float(Fyb.sum() / params.m)


@dataclass(frozen=True)
class Measurement:
    """One sensor frame: response vector r = [beta, omega_z, a_y] and loads."""

    r: np.ndarray
    Fz: np.ndarray


def measure(state: VehicleState, ay_true: float, Fz_true, noise: SensorNoiseSpec,
            rng: np.random.Generator) -> Measurement:
    """Noisy observations: independent zero-mean Gaussian per channel.

    beta is measured as atan(vy/vx). Measured loads are clamped at LOAD_FLOOR
    (a load sensor cannot report a lifted wheel as negative).
    """
    truth = np.array([state.beta, state.omega_z, ay_true])
    r = truth + rng.normal(0.0, 1.0, 3) * noise.response_sigmas()
    Fz = np.asarray(Fz_true, dtype=float) + rng.normal(0.0, noise.sigma_Fz, N_WHEELS)
    return Measurement(r=r, Fz=np.clip(Fz, LOAD_FLOOR, None))


def roll_proxy(ay: float, params: VehicleParams) -> float:
    """Static roll-angle proxy phi = m ay h_cog / K_roll (rad)."""
    return params.m * ay * params.h_cog / params.K_roll
