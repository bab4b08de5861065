"""Closed-loop controllers: nominal tracking law plus the three safety filters.

Four controllers share one interface shape. The nominal law (Stanley steering
+ PD velocity) produces u_nom; the filters then solve small QPs that keep the
sideslip barrier rate admissible:

  * classic_cbf_filter  -- linear CBF row, no variance margin
  * robust_cbf_filter   -- disturbance-observer row with worst-case bound
  * scp_solve           -- risk-constrained row, variance margin kappa*sigma(u)
                           handled by trust-region sequential convex programming

The variance margin makes the exact constraint a reverse second-order cone
(affine >= norm), so each SCP iteration freezes sigma at the previous iterate,
solves the resulting QP, and backtracks if the true nonconvex constraint is
violated by more than the tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import GDegenerate, PathDomain, SCPStalled, VarianceDomain
from .nominal import BarrierLinearization, NominalModel
from .params import (
    IDX_DELTA,
    N_CONTROLS,
    N_RESPONSE,
    N_WHEELS,
    ControllerGains,
    VehicleParams,
    control_array,
)
from .qp import KKTResiduals, QPProblem, QPSolution, solve_qp
from .uncertainty import barrier_gradient_r, validate_covariance

DEFAULT_RHO = 1e6        # slack penalty: safety violations dominate the cost
STEER_WEIGHT = 100.0     # steering deviation weighted 100x a torque deviation


def default_weight() -> np.ndarray:
    Q = np.eye(N_CONTROLS)
    Q[IDX_DELTA, IDX_DELTA] = STEER_WEIGHT
    return Q


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    return float(math.remainder(a, 2.0 * math.pi))


@dataclass(frozen=True)
class ControlLimits:
    """Actuator box plus per-step rate window."""

    lo: np.ndarray            # (7,) box lower bounds
    hi: np.ndarray            # (7,)
    rate: np.ndarray          # (7,) |du/dt| limits
    dt: float                 # control period the rate limits apply over

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=float))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=float))
        object.__setattr__(self, "rate", np.asarray(self.rate, dtype=float))
        if np.any(self.lo > self.hi):
            raise ValueError("control box is empty (lo > hi)")
        if np.any(self.rate <= 0.0) or self.dt <= 0.0:
            raise ValueError("rate limits and dt must be positive")

    @classmethod
    def from_params(cls, params: VehicleParams) -> "ControlLimits":
        return cls(
            lo=params.control_lower(),
            hi=params.control_upper(),
            rate=params.rate_limits(),
            dt=params.dt_control,
        )

    @property
    def authority(self) -> float:
        """||u_max - u_min||_inf over the actuator box."""
        return float(np.max(self.hi - self.lo))

    def window(self, u_prev=None) -> tuple[np.ndarray, np.ndarray]:
        """Effective bounds: box intersected with the rate window around u_prev."""
        if u_prev is None:
            return self.lo.copy(), self.hi.copy()
        u_prev = control_array(u_prev)
        step = self.rate * self.dt
        return np.maximum(self.lo, u_prev - step), np.minimum(self.hi, u_prev + step)

    def clamp(self, u, u_prev=None) -> np.ndarray:
        lo, hi = self.window(u_prev)
        return np.clip(control_array(u), lo, hi)


@dataclass(frozen=True)
class SCPConfig:
    trust_fraction: float = 0.1
    viol_tol: float = 1e-3
    step_tol: float = 1e-4
    max_iter: int = 10
    backtrack: tuple[float, ...] = (0.5, 0.25, 0.125)

    def __post_init__(self):
        if min(self.trust_fraction, self.viol_tol, self.step_tol) <= 0.0:
            raise ValueError("SCP tolerances must be positive")
        if self.max_iter < 1:
            raise ValueError("SCP needs at least one iteration")
        if any(t <= 0.0 or t >= 1.0 for t in self.backtrack):
            raise ValueError("backtracking factors must lie in (0, 1)")


@dataclass(frozen=True)
class RobustEstimatorState:
    """Disturbance-observer state: Delta_hat(r) = Lambda r - xi."""

    xi: np.ndarray                      # (3,) observer internal state
    Lambda: np.ndarray                  # (3, 3) diagonal positive gain
    t: float = 0.0                      # estimator age, s
    e_bar0: float = 0.5                 # transient error bound at t = 0
    e_bar_rate: float = 5.0             # transient decay rate, 1/s
    e_bar_inf: float = 0.02             # steady-state error bound

    def __post_init__(self):
        object.__setattr__(self, "xi", np.asarray(self.xi, dtype=float))
        object.__setattr__(self, "Lambda", np.asarray(self.Lambda, dtype=float))
        lam = self.Lambda
        if lam.shape != (N_RESPONSE, N_RESPONSE) or np.any(lam != np.diag(np.diag(lam))):
            raise ValueError("Lambda must be a 3x3 diagonal matrix")
        if np.any(np.diag(lam) <= 0.0):
            raise ValueError("Lambda diagonal must be positive")

    @classmethod
    def init(cls, r0, gain: float = 5.0, **kwargs) -> "RobustEstimatorState":
        """Fresh observer at measurement r0 (xi_0 = Lambda r0, so Delta_hat(0) = 0)."""
        Lam = np.eye(N_RESPONSE) * gain
        r0 = np.asarray(r0, dtype=float)
        return cls(xi=Lam @ r0, Lambda=Lam, **kwargs)

    def disturbance(self, r_meas) -> np.ndarray:
        return self.Lambda @ np.asarray(r_meas, dtype=float) - self.xi

    def error_bound(self) -> float:
        """Monotone nonincreasing bound: transient decay plus steady floor."""
        return self.e_bar0 * math.exp(-self.e_bar_rate * self.t) + self.e_bar_inf


@dataclass
class FilterDiagnostics:
    """Per-step record written to the run CSV and checked by the test suite."""

    iterations: int
    xi: float
    sigma_param: float
    margin: float                     # kappa * sigma at the returned control
    kkt: KKTResiduals
    violation: float                  # unmet part of the exact constraint (0 = satisfied)
    constraint_active: bool           # barrier row tight at the solution
    deviated: bool                    # returned control differs from u_nom
    stalled: bool = False
    backtracks: int = 0
    working_set: list[int] = field(default_factory=list)
    kkt_history: list[float] = field(default_factory=list)
    iterates: list[np.ndarray] = field(default_factory=list)
    # certificate of the last accepted QP, kept so optimality can be
    # re-verified from scratch outside the solver
    problem: QPProblem | None = None
    solution: QPSolution | None = None


# ---------------------------------------------------------------------------
# nominal tracking controller
# ---------------------------------------------------------------------------

def nominal_control(
    state,
    path,
    gains: ControllerGains,
    params: VehicleParams,
    *,
    ev_prev: float | None = None,
    dt: float | None = None,
) -> np.ndarray:
    """Stanley steering plus PD velocity tracking; returns u_nom (7,).

    The cross-track error is evaluated at the front axle (the reference point
    of the original Stanley formulation) -- measuring it at the CG removes
    the phase lead that keeps a slow-yaw vehicle from limit-cycling against
    the steering rate limit. A geometric curvature feedforward atan(L * kappa)
    carries the steady-state steer of the path so the feedback terms only
    handle the error dynamics; without it the feedback loop has to generate
    the whole curve steer from lag, which leaves it resonant against course
    frequencies near its own bandwidth. Sign convention: the path query
    reports e_y > 0 when the vehicle sits to the LEFT of the reference line,
    so the cross-track term enters with a minus sign and a left offset
    produces a rightward (negative) steering command. The cross-track gain
    divides by the bare speed (no softening constant), so corrections are
    aggressive at crawl speed -- intentionally so: the tracking layer is the
    unsafe baseline the barrier filters are asked to tame. Torques = PD on
    speed error plus aerodynamic-drag feedforward, split equally across the
    six wheels.
    """
    if path is None:
        raise PathDomain("no reference path provided")
    vx = max(state.vx, 1e-3)
    x_fa = state.x + params.a * math.cos(state.psi)
    y_fa = state.y + params.a * math.sin(state.psi)
    pt = path.query(x_fa, y_fa)

    heading_err = wrap_angle(pt.psi_ref - state.psi)
    delta_ff = math.atan(params.wheelbase * pt.kappa)
    delta = delta_ff + heading_err - math.atan(gains.k_stanley * pt.e_y / vx)
    delta = float(np.clip(delta, -params.delta_max, params.delta_max))

    ev = pt.v_target - state.vx
    dt = params.dt_control if dt is None else dt
    ev_dot = 0.0 if ev_prev is None else (ev - ev_prev) / dt
    drag_ff = params.c_drag * vx * abs(vx) * params.Rw
    T_total = gains.k_p * ev + gains.k_d * ev_dot + drag_ff
    T_wheel = float(np.clip(T_total / N_WHEELS, -params.T_max, params.T_max))

    u = np.full(N_CONTROLS, T_wheel)
    u[IDX_DELTA] = delta
    return u


# ---------------------------------------------------------------------------
# variance of the barrier rate under response-measurement noise
# ---------------------------------------------------------------------------

def variance_quadratic(lin: BarrierLinearization, Sigma_r) -> tuple[np.ndarray, float]:
    """(A, c) with sigma_param^2(u) = u' A u + c; A PSD, c >= 0."""
    Sigma = validate_covariance(Sigma_r, N_RESPONSE, "Sigma_r")
    A = lin.grad_Lh.T @ Sigma @ lin.grad_Lh
    c = float(lin.grad_bh @ Sigma @ lin.grad_bh)
    return A, c


def param_variance(u, lin: BarrierLinearization, Sigma_r) -> float:
    """First-order variance of hdot = L_h u + b_h induced by response noise."""
    A, c = variance_quadratic(lin, Sigma_r)
    uv = control_array(u)
    return float(uv @ A @ uv + c)


def build_cvar_row(
    lin: BarrierLinearization,
    mu_h: float,
    sigma_fixed: float,
    alpha_gain: float,
    kappa_val: float,
) -> tuple[np.ndarray, float]:
    """Linear row over (u, xi): L_h u + xi >= kappa*sigma - b_h - k*mu_h.

    Equivalent to  L_h u + b_h + k*mu_h - kappa*sigma_fixed + xi >= 0: the
    risk margin kappa*sigma tightens the admissible set. sigma is a constant
    at each SCP iterate, which is what keeps the row linear.
    """
    if sigma_fixed < 0.0:
        raise VarianceDomain(f"sigma_fixed must be >= 0, got {sigma_fixed}")
    row = np.zeros(N_CONTROLS + 1)
    row[:N_CONTROLS] = lin.L_h
    row[-1] = 1.0
    rhs = kappa_val * sigma_fixed - lin.b_h - alpha_gain * mu_h
    return row, float(rhs)


# ---------------------------------------------------------------------------
# safety filters
# ---------------------------------------------------------------------------

def scp_solve(
    lin: BarrierLinearization,
    mu_h: float,
    Sigma_r,
    u_nom,
    u_prev,
    limits: ControlLimits,
    *,
    kappa_val: float,
    alpha_gain: float = 2.0,
    config: SCPConfig | None = None,
    Q: np.ndarray | None = None,
    rho: float = DEFAULT_RHO,
    warm_set: list[int] | None = None,
    raise_on_stall: bool = False,
    extra_variance: float = 0.0,
    extra_quad: np.ndarray | None = None,
) -> tuple[np.ndarray, FilterDiagnostics]:
    """Risk-constrained safety filter via trust-region SCP.

    Each iteration freezes sigma_param at the previous iterate, solves the
    resulting QP inside box/rate bounds and an inf-norm trust region of
    trust_fraction * control authority, then backtracks toward the previous
    iterate if the exact (nonconvex) constraint is violated beyond viol_tol.
    Terminates on step tolerance, on an exactly-reproduced sigma (the frozen
    subproblem then coincides with the exact problem at the new point), or at
    max_iter. If every backtracking factor fails the previous iterate is
    returned with the stalled flag set.

    extra_variance adds a control-independent variance term under the margin
    and extra_quad (PSD, in command coordinates) a control-dependent one, so
    sigma^2 = u'(A + extra_quad)u + c + extra_variance. The load-variance
    study routes the barrier value variance (via the class-K gain) and the
    load-noise rate channel through these; both can only tighten the margin.
    """
    config = SCPConfig() if config is None else config
    Q = default_weight() if Q is None else Q
    u_nom = control_array(u_nom)
    lo, hi = limits.window(u_prev)
    A, c = variance_quadratic(lin, Sigma_r)
    if extra_variance < 0.0:
        raise VarianceDomain(f"extra_variance must be >= 0, got {extra_variance}")
    c += extra_variance
    if extra_quad is not None:
        A = A + validate_covariance(extra_quad, N_CONTROLS, "extra_quad")
    delta_max = config.trust_fraction * limits.authority

    def sigma_at(u: np.ndarray) -> float:
        return math.sqrt(max(0.0, float(u @ A @ u) + c))

    def exact_residual(u: np.ndarray, xi: float) -> float:
        """Signed slack of the exact constraint (negative = violated)."""
        return float(
            lin.L_h @ u + lin.b_h + alpha_gain * mu_h - kappa_val * sigma_at(u) + xi
        )

    u_k = np.clip(u_nom, lo, hi)
    xi_k = 0.0
    sol = None
    stalled = False
    backtracks = 0
    iterations = 0
    kkt_history: list[float] = []
    iterates: list[np.ndarray] = [u_k.copy()]

    for _ in range(config.max_iter):
        sigma_frozen = sigma_at(u_k)
        row, rhs = build_cvar_row(lin, mu_h, sigma_frozen, alpha_gain, kappa_val)
        t_lo = np.maximum(lo, u_k - delta_max)
        t_hi = np.minimum(hi, u_k + delta_max)
        prob = QPProblem(Q, rho, u_nom, row[None, :], np.array([rhs]), t_lo, t_hi)
        sol = solve_qp(prob, u_start=u_k, warm_set=warm_set)
        warm_set = sol.working_set
        iterations += 1
        kkt_history.append(sol.kkt.worst)

        u_new, xi_new = sol.u.copy(), sol.xi
        viol = max(0.0, -exact_residual(u_new, xi_new))
        if viol > config.viol_tol:
            # A step is acceptable if it restores the exact constraint or at
            # least improves on the violation at the current iterate (starting
            # infeasible and walking toward the boundary is the normal case).
            viol_base = max(0.0, -exact_residual(u_k, xi_new))
            if viol >= viol_base - 1e-12:
                for tau in config.backtrack:
                    backtracks += 1
                    u_try = u_k + tau * (u_new - u_k)
                    v_try = max(0.0, -exact_residual(u_try, xi_new))
                    if v_try <= config.viol_tol or v_try < viol_base - 1e-12:
                        u_new = u_try
                        break
                else:
                    stalled = True
                    u_new, xi_new = u_k, xi_k   # previous iterate is the answer
                    iterates.append(u_new.copy())
                    break

        step = float(np.linalg.norm(u_new - u_k))
        sigma_exact = abs(sigma_at(u_new) ** 2 - sigma_frozen**2) <= 1e-14 * max(
            1.0, sigma_frozen**2
        )
        u_k, xi_k = u_new, xi_new
        iterates.append(u_k.copy())
        if step < config.step_tol or sigma_exact:
            break

    if stalled and raise_on_stall:
        raise SCPStalled(
            f"all backtracking factors left the exact constraint violated by > {config.viol_tol}"
        )

    sigma_final = sigma_at(u_k)
    row, rhs = build_cvar_row(lin, mu_h, sigma_final, alpha_gain, kappa_val)
    slack = float(row[:N_CONTROLS] @ u_k + xi_k - rhs)
    diag = FilterDiagnostics(
        iterations=iterations,
        xi=xi_k,
        sigma_param=sigma_final,
        margin=kappa_val * sigma_final,
        kkt=sol.kkt,
        violation=max(0.0, -exact_residual(u_k, xi_k)),
        constraint_active=slack < 1e-6,
        deviated=bool(np.max(np.abs(u_k - u_nom)) > 1e-6),
        stalled=stalled,
        backtracks=backtracks,
        working_set=list(warm_set or []),
        kkt_history=kkt_history,
        iterates=iterates,
        problem=prob,
        solution=sol,
    )
    return u_k, diag


def classic_cbf_filter(
    lin: BarrierLinearization,
    mu_h: float,
    u_nom,
    limits: ControlLimits,
    *,
    u_prev=None,
    alpha_gain: float = 2.0,
    Q: np.ndarray | None = None,
    rho: float = DEFAULT_RHO,
    warm_set: list[int] | None = None,
) -> tuple[np.ndarray, FilterDiagnostics]:
    """Plain CBF filter: the variance margin drops out (Sigma_r = 0)."""
    return scp_solve(
        lin,
        mu_h,
        np.zeros((N_RESPONSE, N_RESPONSE)),
        u_nom,
        u_prev,
        limits,
        kappa_val=0.0,
        alpha_gain=alpha_gain,
        Q=Q,
        rho=rho,
        warm_set=warm_set,
    )


# Structural rank of the input matrix for this drivetrain: steering plus
# differential torque (the lateral-acceleration row is proportional to the
# yaw row, so full rank 3 is never attained).
_G_RANK_EXPECTED = 2


def robust_cbf_filter(
    r_meas,
    Fz_meas,
    lin: BarrierLinearization,
    mu_h: float,
    u_nom,
    u_prev,
    est: RobustEstimatorState,
    model: NominalModel,
    limits: ControlLimits,
    w: float,
    *,
    alpha_gain: float = 2.0,
    Q: np.ndarray | None = None,
    rho: float = DEFAULT_RHO,
    dt: float | None = None,
    warm_set: list[int] | None = None,
) -> tuple[np.ndarray, RobustEstimatorState, FilterDiagnostics]:
    """Disturbance-observer CBF baseline.

    Estimates the lumped disturbance Delta_hat = Lambda r - xi, compensates it
    through the input-matrix pseudo-inverse, and tightens the barrier row by
    the worst-case estimation error ||grad h|| * e_bar(t):

        L_h (u - g^+ Delta_hat) + b_h + grad_h . Delta_hat
            - ||grad_h|| e_bar(t) + k mu_h >= -xi

    Returns (control, advanced estimator state, diagnostics); the observer is
    integrated one control period with the control actually applied.
    """
    Q = default_weight() if Q is None else Q
    r = np.asarray(r_meas, dtype=float)
    u_nom = control_array(u_nom)
    dt = limits.dt if dt is None else dt

    delta_hat = est.disturbance(r)
    g = model.input_matrix(Fz_meas)
    svals = np.linalg.svd(g, compute_uv=False)
    rank = int(np.sum(svals > max(g.shape) * np.finfo(float).eps * svals[0])) if svals[0] > 0 else 0
    if rank < _G_RANK_EXPECTED:
        raise GDegenerate(
            f"input matrix rank {rank} < {_G_RANK_EXPECTED}; cannot compensate the disturbance"
        )
    g_pinv = np.linalg.pinv(g)

    grad_h = barrier_gradient_r(float(r[0]), w)
    e_bar = est.error_bound()
    offset = float(
        -lin.L_h @ (g_pinv @ delta_hat)
        + grad_h @ delta_hat
        - np.linalg.norm(grad_h) * e_bar
    )

    row = np.zeros(N_CONTROLS + 1)
    row[:N_CONTROLS] = lin.L_h
    row[-1] = 1.0
    rhs = -(lin.b_h + alpha_gain * mu_h + offset)

    lo, hi = limits.window(u_prev)
    prob = QPProblem(Q, rho, u_nom, row[None, :], np.array([rhs]), lo, hi)
    sol = solve_qp(prob, u_start=np.clip(u_nom, lo, hi), warm_set=warm_set)

    # advance the observer with the applied control: xi_dot = Lambda (f + Delta_hat)
    r_dot_nom = model.f(r, sol.u, Fz_meas)
    xi_next = est.xi + dt * (est.Lambda @ (r_dot_nom + delta_hat))
    est_next = replace(est, xi=xi_next, t=est.t + dt)

    slack = float(row[:N_CONTROLS] @ sol.u + sol.xi - rhs)
    diag = FilterDiagnostics(
        iterations=1,
        xi=sol.xi,
        sigma_param=0.0,
        margin=np.linalg.norm(grad_h) * e_bar,
        kkt=sol.kkt,
        violation=max(0.0, -slack),
        constraint_active=slack < 1e-6,
        deviated=bool(np.max(np.abs(sol.u - u_nom)) > 1e-6),
        working_set=list(sol.working_set),
        kkt_history=[sol.kkt.worst],
        iterates=[sol.u.copy()],
        problem=prob,
        solution=sol,
    )
    return sol.u, est_next, diag
