"""Delta-method propagation of measurement uncertainty into the barrier.

The safety certificate is the load-weighted sideslip barrier

    h(r, Fz) = w(Fz)^2 * beta_lim^2 - beta^2,
    w(Fz)    = (sum_i Fz_i / (n * Fz_nom))^gamma,   gamma in (0, 1/2).

Measured responses r~ = r + eps_r and loads Fz~ = Fz + eps_F turn h into a
random variable; a first-order (delta-method) expansion gives Gaussian moments

    mu_h     = h(r~, Fz~)
    sigma_h2 = grad_r h' Sigma_r grad_r h + grad_F h' Sigma_F grad_F h

with the conventions grad_r h = [-2 w^2 beta, 0, 0] (simplified single-channel
variance 4 w^4 beta^2 sigma_beta^2) and the load gradient

    dh/dFz_k = (2 gamma beta_lim^2 / (n Fz_nom)) * w^((2 gamma - 1)/gamma),

whose exponent is negative for gamma < 1/2: the gradient *diverges* as total
load vanishes, which is why the full (load-variance) model enforces a floor on
w and the default controller uses the simplified variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LoadDomain, SingularLoadRegime
from .params import N_CONTROLS, N_RESPONSE, N_WHEELS, SafetyLimits, VehicleParams


@dataclass(frozen=True)
class BarrierSpec:
    """Static parameters of the sideslip barrier."""

    beta_lim: float = 0.15
    gamma: float = 0.3
    Fz_nom: float = 75_000.0
    n: int = N_WHEELS
    w_floor: float = 0.3   # full-variance model refuses to evaluate below this

    def __post_init__(self):
        if not 0.0 < self.gamma < 0.5:
            raise ValueError(f"gamma must lie in (0, 0.5), got {self.gamma}")
        if self.beta_lim <= 0.0:
            raise ValueError(f"beta_lim must be positive, got {self.beta_lim}")

    @classmethod
    def from_limits(cls, limits: SafetyLimits, params: VehicleParams) -> "BarrierSpec":
        return cls(
            beta_lim=limits.beta_lim,
            gamma=limits.gamma_w,
            Fz_nom=params.Fz_nom,
            n=N_WHEELS,
            w_floor=limits.w_floor,
        )


@dataclass(frozen=True)
class BarrierDistribution:
    mu_h: float
    sigma_h2: float

    @property
    def sigma_h(self) -> float:
        return float(np.sqrt(self.sigma_h2))


def validate_covariance(S, dim: int | None = None, name: str = "covariance") -> np.ndarray:
    """Check symmetry (1e-12) and PSD-ness (eigs >= -1e-10); return symmetrized copy."""
    S = np.asarray(S, dtype=float)
    if dim is not None and S.shape != (dim, dim):
        raise ValueError(f"{name} must be {dim}x{dim}, got {S.shape}")
    if S.shape[0] != S.shape[1]:
        raise ValueError(f"{name} must be square, got {S.shape}")
    scale = max(1.0, float(np.abs(S).max()))
    if np.abs(S - S.T).max() > 1e-12 * scale:
        raise ValueError(f"{name} is not symmetric")
    S = 0.5 * (S + S.T)
    eigs = np.linalg.eigvalsh(S)
    if eigs.min() < -1e-10 * scale:
        raise ValueError(f"{name} is not PSD (min eig {eigs.min():.3e})")
    return S


def load_scale(Fz, spec: BarrierSpec) -> float:
    """Normalized-load weight w = (sum Fz / (n * Fz_nom))^gamma; w = 1 at nominal."""
    Fz = np.asarray(Fz, dtype=float)
    if np.any(Fz <= 0.0):
        raise LoadDomain(f"all loads must be positive, got min {Fz.min():.1f} N")
    return float((Fz.sum() / (spec.n * spec.Fz_nom)) ** spec.gamma)


def barrier_value(beta: float, w: float, spec: BarrierSpec) -> float:
    return w * w * spec.beta_lim**2 - beta * beta


def barrier_gradient_r(beta: float, w: float) -> np.ndarray:
    """grad_r h in the barrier's weighted convention: [-2 w^2 beta, 0, 0]."""
    return np.array([-2.0 * w * w * beta, 0.0, 0.0])


def barrier_distribution(r_meas, w: float, sigma_beta2: float, spec: BarrierSpec) -> BarrierDistribution:
    """Simplified (response-noise-only) barrier moments.

    sigma_h2 = 4 w^4 beta^2 sigma_beta^2 — the single surviving term of the
    delta-method variance when load noise is dropped.
    """
    if sigma_beta2 < 0.0:
        raise ValueError(f"sigma_beta2 must be >= 0, got {sigma_beta2}")
    beta = float(np.asarray(r_meas, dtype=float).reshape(-1)[0])
    mu_h = barrier_value(beta, w, spec)
    sigma_h2 = 4.0 * w**4 * beta**2 * sigma_beta2
    return BarrierDistribution(mu_h, sigma_h2)


def load_gradient(Fz, spec: BarrierSpec) -> np.ndarray:
    """dh/dFz: identical entries (2 gamma beta_lim^2/(n Fz_nom)) * w^((2g-1)/g)."""
    w = load_scale(Fz, spec)
    expo = (2.0 * spec.gamma - 1.0) / spec.gamma
    mag = (2.0 * spec.gamma * spec.beta_lim**2 / (spec.n * spec.Fz_nom)) * w**expo
    return np.full(spec.n, mag)


def barrier_distribution_full(r_meas, Fz_meas, Sigma_r, Sigma_F, spec: BarrierSpec) -> BarrierDistribution:
    """Two-term delta-method variance including the load-noise contribution.

    Used by the +LoadVar controller variant only. Refuses to evaluate in the
    singular low-load regime (w below spec.w_floor) where the load gradient
    diverges.
    """
    Sigma_r = validate_covariance(Sigma_r, N_RESPONSE, "Sigma_r")
    Sigma_F = validate_covariance(Sigma_F, spec.n, "Sigma_F")
    w = load_scale(Fz_meas, spec)
    if w < spec.w_floor:
        raise SingularLoadRegime(
            f"load scale w = {w:.3f} below floor {spec.w_floor}: load-variance term diverges"
        )
    base = barrier_distribution(r_meas, w, float(Sigma_r[0, 0]), spec)
    gF = load_gradient(Fz_meas, spec)
    load_term = float(gF @ Sigma_F @ gF)
    return BarrierDistribution(base.mu_h, base.sigma_h2 + load_term)


def response_derivative_distribution(r_meas, u, Fz_meas, Sigma_r, Sigma_F, model):
    """Gaussian moments of rdot = f(r~, u, Fz~) under measurement noise.

    mean = f at the measured point; covariance = J_r Sigma_r J_r' + J_F Sigma_F J_F'
    with the analytic Jacobians of the nominal response model.
    """
    Sigma_r = validate_covariance(Sigma_r, N_RESPONSE, "Sigma_r")
    Sigma_F = validate_covariance(Sigma_F, N_WHEELS, "Sigma_F")
    mean = model.f(r_meas, u, Fz_meas)
    Jr = model.jac_r(r_meas, u, Fz_meas)
    JF = model.jac_F(r_meas, u, Fz_meas)
    cov = Jr @ Sigma_r @ Jr.T + JF @ Sigma_F @ JF.T
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def rate_load_quadratic(r_meas, Fz_meas, Sigma_F, w: float, model) -> tuple[np.ndarray, float]:
    """Load-noise contribution to the barrier-rate variance, split in u.

    Load measurement noise enters hdot through the response dynamics:

        Var_F[hdot](u) = grad_r h' J_F(u) Sigma_F J_F(u)' grad_r h.

    With linear tires J_F is affine in the command, so this variance is an
    exact quadratic in u; it is returned as (A, c) with A the pure command
    quadratic and c the command-free floor, the cross term dropped to match
    the response-channel convention in the filter.  The residual-driven
    covariance update already absorbs this channel implicitly, so adding it
    explicitly (the retain-load-variance ablation) double-counts load noise
    and can only tighten the risk margin: A is PSD and c >= 0 by construction.
    """
    Sigma_F = validate_covariance(Sigma_F, N_WHEELS, "Sigma_F")
    r_meas = np.asarray(r_meas, dtype=float)
    g_beta = -2.0 * w * w * r_meas[0]          # dh/dbeta at the measured point
    u0 = np.zeros(N_CONTROLS)
    v0 = g_beta * model.jac_F(r_meas, u0, Fz_meas)[0]
    V1 = np.empty((N_WHEELS, N_CONTROLS))
    for j in range(N_CONTROLS):
        ej = np.zeros(N_CONTROLS)
        ej[j] = 1.0
        V1[:, j] = g_beta * model.jac_F(r_meas, ej, Fz_meas)[0] - v0
    A = V1.T @ Sigma_F @ V1
    A = 0.5 * (A + A.T)
    c = float(v0 @ Sigma_F @ v0)
    return A, c


def delta_error_bound(sigma_beta: float, beta_lim: float, L_h: float = 4.0) -> float:
    """Normalized second-order remainder bound L_h * (sigma_beta/beta_lim)^2.

    Bounds |E[h] - mu_h| / sigma_h near the barrier boundary; used as the
    tolerance in delta-vs-Monte-Carlo comparisons.
    """
    if beta_lim <= 0.0:
        raise ValueError(f"beta_lim must be positive, got {beta_lim}")
    return L_h * (sigma_beta / beta_lim) ** 2
