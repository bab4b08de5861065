"""Online identification of the response-noise covariance.

One-step prediction residuals e_t = r~_{t+1} - (r~_t + dt f(r~_t, u_t, F~_t))
feed a conjugate inverse-Wishart update with exponential forgetting:

    Psi_t = lambda Psi_{t-1} + M^{-1} e e' M^{-T},   nu_t = lambda nu_{t-1} + 1,

where M = I + dt J_r linearizes the one-step map. The posterior mean
Psi/(nu - n_r - 1) (n_r = 3) is the covariance the controller plugs into its
risk margin. Forgetting trades tracking speed against steady-state variance;
`optimal_lambda` gives the drift-matched choice.

The M-transform is only well conditioned when the step is small relative to
the response stiffness; past ||dt J_r||_inf >= 0.5 the update falls back to
M = I, which is the conservative (variance-inflating) reading of the residual.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DOFDomain, ForgettingDomain, JacobianDegenerate
from .params import N_RESPONSE

# Posterior-mean denominator offset: nu - (n_r + 1) with n_r = 3.
_MEAN_OFFSET = N_RESPONSE + 1
M_FALLBACK_NORM = 0.5


@dataclass(frozen=True)
class Residual:
    """One-step prediction residual and its linearized propagation matrix."""

    e: np.ndarray
    M: np.ndarray


@dataclass(frozen=True)
class IWState:
    """Inverse-Wishart posterior (scale Psi, dof nu) with forgetting lambda."""

    Psi: np.ndarray
    nu: float
    lam: float = 0.99

    def __post_init__(self):
        Psi = np.asarray(self.Psi, dtype=float)
        if Psi.shape != (N_RESPONSE, N_RESPONSE):
            raise ValueError(f"Psi must be 3x3, got {Psi.shape}")
        if np.linalg.eigvalsh(0.5 * (Psi + Psi.T)).min() <= 0.0:
            raise ValueError("Psi must be symmetric positive definite")
        if self.nu <= _MEAN_OFFSET:
            raise DOFDomain(f"nu must exceed {_MEAN_OFFSET}, got {self.nu}")
        if not 0.0 < self.lam <= 1.0:
            raise ForgettingDomain(f"lambda must lie in (0, 1], got {self.lam}")


def prediction_residual(r_prev, r_next, u, Fz, model, dt: float) -> Residual:
    """Residual of the Euler one-step prediction r~ + dt f(r~, u, F~)."""
    if dt <= 0.0:
        raise ValueError(f"dt must be positive, got {dt}")
    r_prev = np.asarray(r_prev, dtype=float)
    r_next = np.asarray(r_next, dtype=float)
    e = r_next - (r_prev + dt * model.f(r_prev, u, Fz))
    dtJ = dt * model.jac_r(r_prev, u, Fz)
    if np.abs(dtJ).sum(axis=1).max() < M_FALLBACK_NORM:
        M = np.eye(N_RESPONSE) + dtJ
    else:
        M = np.eye(N_RESPONSE)
    if abs(np.linalg.det(M)) < 1e-12:
        raise JacobianDegenerate("one-step propagation matrix M is singular")
    return Residual(e=e, M=M)


def iw_init(sigma_spec, nu0: float | None = None) -> IWState:
    """Prior whose posterior mean equals diag(sigma_spec) exactly.

    sigma_spec: per-channel variances. nu0 defaults to 2 n_r + 5 = 11.
    """
    d = np.asarray(sigma_spec, dtype=float)
    if nu0 is None:
        nu0 = 2 * N_RESPONSE + 5
    if nu0 <= _MEAN_OFFSET:
        raise DOFDomain(f"nu0 must exceed {_MEAN_OFFSET}, got {nu0}")
    Psi0 = (nu0 - _MEAN_OFFSET) * np.diag(d)
    return IWState(Psi=Psi0, nu=float(nu0))


def iw_update(state: IWState, res: Residual, raw: bool = False) -> IWState:
    """One forgetting-discounted conjugate update.

    raw=True skips the M^{-1} transform and accumulates e e' directly (ablation
    of the residual whitening; same fixed point when M = I).
    """
    if raw:
        v = res.e
    else:
        try:
            v = np.linalg.solve(res.M, res.e)
        except np.linalg.LinAlgError as exc:
            raise JacobianDegenerate("one-step propagation matrix M is singular") from exc
    Psi = state.lam * state.Psi + np.outer(v, v)
    Psi = 0.5 * (Psi + Psi.T)
    return IWState(Psi=Psi, nu=state.lam * state.nu + 1.0, lam=state.lam)


def iw_mean(state: IWState) -> np.ndarray:
    """Posterior-mean covariance Psi/(nu - 4)."""
    return state.Psi / (state.nu - _MEAN_OFFSET)


def optimal_lambda(tau_dt: float, trace_sigma_e: float) -> float:
    """Drift-matched forgetting factor 1 - sqrt(2 (n_r + 1) tau_dt / tr(Sigma_e)).

    tau_dt: Frobenius covariance drift per step; trace_sigma_e: residual
    covariance trace. Raises ForgettingDomain when drift is too fast for any
    lambda in (0, 1).
    """
    if tau_dt <= 0.0 or trace_sigma_e <= 0.0:
        raise ValueError("tau_dt and trace_sigma_e must be positive")
    lam = 1.0 - np.sqrt(2.0 * (N_RESPONSE + 1) * tau_dt / trace_sigma_e)
    if not 0.0 < lam < 1.0:
        raise ForgettingDomain(
            f"drift too fast: computed lambda = {lam:.4f} outside (0, 1)"
        )
    return float(lam)


def residual_covariance_lower_bound(M, Sigma_r, J_F, Sigma_F, dt: float) -> np.ndarray:
    """Lower bound M Sigma_r M' + dt^2 J_F Sigma_F J_F' on E[e e']."""
    M = np.asarray(M, dtype=float)
    J_F = np.asarray(J_F, dtype=float)
    Sigma_r = np.asarray(Sigma_r, dtype=float)
    Sigma_F = np.asarray(Sigma_F, dtype=float)
    bound = M @ Sigma_r @ M.T + dt * dt * (J_F @ Sigma_F @ J_F.T)
    return 0.5 * (bound + bound.T)
