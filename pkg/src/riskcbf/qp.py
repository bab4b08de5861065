"""Dense primal active-set solver for the safety-filter QP.

The subproblem at each filter step is tiny (7 controls + 1 slack, ~18 rows):

    min_{u, xi}  (u - u_nom)' Q (u - u_nom) + rho xi^2
    s.t.         A [u; xi] >= rhs          (CVaR / barrier rows, slack-coupled)
                 lo <= u <= hi             (box intersected with rate window)
                 xi >= 0

An active-set method with explicit KKT solves is deterministic, warm-startable
from the previous control step, and produces exact multipliers for the KKT
certificate the tests re-verify. Interior-point would be overkill at this size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import QPNoConverge
from .params import N_CONTROLS

_MAX_ITER = 200
_LAMBDA_TOL = 1e-9     # multiplier nonnegativity slack
_STEP_TOL = 1e-12      # "p = 0" threshold relative to variable scale
_ACTIVE_TOL = 1e-10    # constraint considered active for warm starts


@dataclass
class QPProblem:
    """One safety-filter QP over z = (u, xi)."""

    Q: np.ndarray                    # (7, 7) SPD control weight
    rho: float                       # slack penalty
    u_nom: np.ndarray                # (7,)
    rows: np.ndarray                 # (m, 8) general inequality rows, A z >= rhs
    rhs: np.ndarray                  # (m,)
    lo: np.ndarray                   # (7,) effective lower bounds on u
    hi: np.ndarray                   # (7,)

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        self.u_nom = np.asarray(self.u_nom, dtype=float)
        self.rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        if self.rows.size == 0:
            self.rows = np.zeros((0, N_CONTROLS + 1))
        self.rhs = np.asarray(self.rhs, dtype=float).reshape(-1)
        self.lo = np.asarray(self.lo, dtype=float)
        self.hi = np.asarray(self.hi, dtype=float)
        if self.Q.shape != (N_CONTROLS, N_CONTROLS):
            raise ValueError(f"Q must be {N_CONTROLS}x{N_CONTROLS}, got {self.Q.shape}")
        if np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T)).min() <= 0.0:
            raise ValueError("Q must be SPD")
        if self.rho <= 0.0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.rows.shape[1] != N_CONTROLS + 1 or self.rows.shape[0] != self.rhs.size:
            raise ValueError("rows must be (m, 8) with matching rhs")
        if np.any(self.lo > self.hi):
            raise ValueError("empty box: lo > hi")


@dataclass(frozen=True)
class KKTResiduals:
    stationarity: float
    primal: float
    complementarity: float

    @property
    def worst(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


@dataclass
class QPSolution:
    u: np.ndarray
    xi: float
    lam: np.ndarray               # multipliers, one per assembled row
    kkt: KKTResiduals
    iterations: int
    working_set: list[int] = field(default_factory=list)
    n_general: int = 0            # assembled-row layout: general rows first


def _assemble(prob: QPProblem):
    """Stack cost and all inequality rows over z = (u, xi); G z >= h."""
    n = N_CONTROLS + 1
    H = np.zeros((n, n))
    H[:N_CONTROLS, :N_CONTROLS] = 2.0 * prob.Q
    H[-1, -1] = 2.0 * prob.rho
    g = np.zeros(n)
    g[:N_CONTROLS] = -2.0 * prob.Q @ prob.u_nom

    m = prob.rows.shape[0]
    G = np.zeros((m + 2 * N_CONTROLS + 1, n))
    h = np.zeros(m + 2 * N_CONTROLS + 1)
    G[:m] = prob.rows
    h[:m] = prob.rhs
    eye = np.eye(N_CONTROLS)
    G[m:m + N_CONTROLS, :N_CONTROLS] = eye            # u >= lo
    h[m:m + N_CONTROLS] = prob.lo
    G[m + N_CONTROLS:m + 2 * N_CONTROLS, :N_CONTROLS] = -eye   # -u >= -hi
    h[m + N_CONTROLS:m + 2 * N_CONTROLS] = -prob.hi
    G[-1, -1] = 1.0                                   # xi >= 0
    return H, g, G, h


def _feasible_start(prob: QPProblem, u_start) -> np.ndarray:
    u0 = prob.u_nom if u_start is None else np.asarray(u_start, dtype=float)
    u0 = np.clip(u0, prob.lo, prob.hi)
    xi0 = 0.0
    for A_row, b in zip(prob.rows, prob.rhs):
        gap = b - A_row[:N_CONTROLS] @ u0
        c = A_row[-1]
        if gap > 0.0:
            if c <= 1e-14:
                raise ValueError("general row without slack coupling is infeasible at start")
            xi0 = max(xi0, gap / c)
    return np.concatenate([u0, [xi0]])


def _kkt_solve(M, rhs):
    """Linear solve with least-squares fallback for singular working sets."""
    try:
        return np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError:
        sol, *_ = np.linalg.lstsq(M, rhs, rcond=None)
        return sol


def kkt_residuals(H, g, G, h, z, lam) -> KKTResiduals:
    slack = G @ z - h
    stat = float(np.abs(H @ z + g - G.T @ lam).max())
    primal = float(max(0.0, -slack.min()) if slack.size else 0.0)
    comp = float(np.abs(lam * slack).max() if slack.size else 0.0)
    return KKTResiduals(stat, primal, comp)


def solve_qp(prob: QPProblem, u_start=None, warm_set=None) -> QPSolution:
    """Primal active-set solve; returns solution with exact KKT certificate.

    u_start: feasible warm-start controls (clipped into the box); warm_set:
    assembled-row indices to seed the working set (kept only if active).
    """
    H, g, G, h = _assemble(prob)
    n = H.shape[0]
    z = _feasible_start(prob, u_start)
    scale = 1.0 + float(np.abs(z).max())

    work: list[int] = []
    if warm_set:
        for i in warm_set:
            if 0 <= i < G.shape[0] and abs(G[i] @ z - h[i]) < _ACTIVE_TOL * scale:
                work.append(i)

    for it in range(1, _MAX_ITER + 1):
        k = len(work)
        KKT = np.zeros((n + k, n + k))
        KKT[:n, :n] = H
        rhs_v = np.zeros(n + k)
        rhs_v[:n] = -(H @ z + g)
        if k:
            Gw = G[work]
            # Stationarity in standard sign convention: H(z+p) + g = Gw' lam,
            # lam >= 0 at optimum for >= rows.
            KKT[:n, n:] = -Gw.T
            KKT[n:, :n] = Gw
        sol = _kkt_solve(KKT, rhs_v)
        p = sol[:n]
        lam_w = sol[n:]

        if np.abs(p).max() <= _STEP_TOL * scale:
            if k == 0 or lam_w.min() >= -_LAMBDA_TOL:
                # One pass of iterative refinement on the terminal KKT system
                # removes the float drift accumulated over the incremental
                # z updates, keeping the returned certificate near machine
                # precision instead of at solve-tolerance scale.
                if k:
                    defect = np.concatenate(
                        [H @ z + g - Gw.T @ lam_w, Gw @ z - h[work]]
                    )
                    corr = _kkt_solve(KKT, -defect)
                    z = z + corr[:n]
                    lam_w = lam_w + corr[n:]
                else:
                    z = z - _kkt_solve(H, H @ z + g)
                lam = np.zeros(G.shape[0])
                lam[work] = np.maximum(lam_w, 0.0)
                res = kkt_residuals(H, g, G, h, z, lam)
                return QPSolution(
                    u=z[:N_CONTROLS].copy(), xi=float(z[-1]), lam=lam, kkt=res,
                    iterations=it, working_set=sorted(work),
                    n_general=prob.rows.shape[0],
                )
            work.pop(int(np.argmin(lam_w)))
            continue

        # Step toward the EQP minimizer, stopping at the first blocking row.
        alpha = 1.0
        blocking = -1
        Gp = G @ p
        for i in range(G.shape[0]):
            if i in work or Gp[i] >= -1e-14:
                continue
            a_i = (h[i] - G[i] @ z) / Gp[i]
            if a_i < alpha:
                alpha = a_i
                blocking = i
        z = z + max(alpha, 0.0) * p
        scale = 1.0 + float(np.abs(z).max())
        if blocking >= 0:
            work.append(blocking)

    lam = np.zeros(G.shape[0])
    res = kkt_residuals(H, g, G, h, z, lam)
    raise QPNoConverge(
        f"active-set iteration cap {_MAX_ITER} exceeded "
        f"(stationarity {res.stationarity:.2e}, primal {res.primal:.2e})"
    )


def objective_value(prob: QPProblem, u, xi: float) -> float:
    du = np.asarray(u, dtype=float) - prob.u_nom
    return float(du @ prob.Q @ du + prob.rho * xi * xi)


def verify_solution(prob: QPProblem, sol: QPSolution) -> KKTResiduals:
    """Recompute KKT residuals from scratch for an already-returned solution.

    Independent of the solver's own bookkeeping: reassembles the problem and
    evaluates stationarity / primal feasibility / complementarity at sol.
    """
    H, g, G, h = _assemble(prob)
    z = np.concatenate([sol.u, [sol.xi]])
    return kkt_residuals(H, g, G, h, z, sol.lam)
