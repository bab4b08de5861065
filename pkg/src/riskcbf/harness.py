"""Closed-loop simulation harness, metrics, ablations, and run artifacts.

One control step (50 ms) proceeds measurement -> filter -> plant:

  1. body accelerations under the still-applied previous control give the
     IMU sample and the quasi-static wheel loads,
  2. the sensor model produces the noisy response/load measurement,
  3. the residual between this measurement and the previous step's one-step
     prediction updates the inverse-Wishart noise posterior (adaptive
     controllers only),
  4. the selected controller maps the measurement to a control,
  5. the plant integrates one control period on the fine RK4 grid.

Runs are deterministic in (scenario, controller, variant, seed): every noise
stream is seeded from the run seed. A run that produces a non-finite state,
a sideslip beyond 90 deg, or a stalled plant is truncated at that step and
marked diverged; metrics are computed over the survived horizon.

Activation accounting: rho_cbf counts steps where the filter output differs
(> 1e-6 on any channel) from the rate/box-clamped nominal command, so plain
actuator saturation during the launch ramp does not register as barrier
activity; the constraint-active flag is logged alongside.
"""

from __future__ import annotations

import hashlib
import math
import multiprocessing as mp
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .bayes import iw_init, iw_mean, iw_update, prediction_residual
from .controller import (
    ControlLimits,
    FilterDiagnostics,
    RobustEstimatorState,
    classic_cbf_filter,
    nominal_control,
    robust_cbf_filter,
    scp_solve,
)
from .cvar import kappa, tail_bound
from .errors import QPNoConverge, SingularLoadRegime
from .nominal import NominalModel, linearize_barrier
from .params import (
    ControllerGains,
    SafetyLimits,
    SensorNoiseSpec,
    VehicleParams,
    VehicleState,
)
from .plant import (
    LOAD_FLOOR,
    body_accelerations,
    estimate_loads,
    measure,
    roll_proxy,
    step_plant,
)
from .qp import verify_solution
from .scenarios import Scenario
from .uncertainty import (
    BarrierSpec,
    barrier_distribution,
    barrier_distribution_full,
    load_scale,
    rate_load_quadratic,
)

CONTROLLER_KINDS = ("clf", "classic", "robust", "r2cbf")
VARIANTS = ("full", "loadvar", "nocvar", "nobayes")

# The adaptive controllers start from a deliberately conservative noise prior
# (sigma padded by this factor, i.e. 16x the spec variance) and learn the
# realized level online; the frozen-prior ablation keeps the padded prior for
# the whole run, which is what makes it over-conservative.
PRIOR_SIGMA_SCALE = 4.0

# Speed below which the response model is no longer trustworthy; reaching it
# mid-run counts as divergence (the launch speed sits well above it).
VX_FLOOR = 0.5

KKT_RECHECK_FRACTION = 0.01
KKT_TOL = 1e-6

SERIES_COLUMNS = (
    "t", "x", "y", "psi", "vx", "vy", "omega", "beta", "ay", "phi",
    "mu", "w", "e_y", "e_psi", "v_target",
    "beta_meas", "omega_meas", "ay_meas",
    "delta", "T1", "T2", "T3", "T4", "T5", "T6", "delta_nom",
    "xi", "sigma_param", "margin", "scp_iters", "kkt_worst",
    "active", "deviated", "stalled", "backtracks",
)


@dataclass(frozen=True)
class MetricsReport:
    """The per-run summary table: peaks, safety margins, tracking, activation."""

    beta_max_deg: float
    omega_max_deg: float
    ay_max: float
    phi_max_deg: float
    margin_beta: float      # (1 - peak/limit) * 100, can go negative
    margin_omega: float
    margin_ay: float
    margin_phi: float
    margin_min: float
    rms_ey: float
    rms_epsi_deg: float
    rho_cbf: float          # % of steps the filter changed the clamped command
    n_steps: int
    n_active: int           # steps with the barrier row tight
    n_deviated: int

    def as_dict(self) -> dict[str, float]:
        return {
            "beta_max_deg": self.beta_max_deg,
            "omega_max_deg": self.omega_max_deg,
            "ay_max": self.ay_max,
            "phi_max_deg": self.phi_max_deg,
            "margin_beta": self.margin_beta,
            "margin_omega": self.margin_omega,
            "margin_ay": self.margin_ay,
            "margin_phi": self.margin_phi,
            "margin_min": self.margin_min,
            "rms_ey": self.rms_ey,
            "rms_epsi_deg": self.rms_epsi_deg,
            "rho_cbf": self.rho_cbf,
            "n_steps": self.n_steps,
            "n_active": self.n_active,
            "n_deviated": self.n_deviated,
        }


@dataclass
class RunRecord:
    """Everything one closed-loop run produced."""

    scenario: str
    controller: str
    variant: str | None
    seed: int
    config_hash: str
    dt: float
    diverged: bool = False
    diverged_step: int | None = None
    diverged_reason: str = ""
    stall_steps: int = 0            # SCP returned the previous iterate
    fallback_steps: int = 0         # +LoadVar fell back to the simplified variance
    hard_failures: list[str] = field(default_factory=list)
    series: dict[str, np.ndarray] = field(default_factory=dict)
    metrics: MetricsReport | None = None


def config_fingerprint(*parts) -> str:
    """Short stable hash of the run configuration (dataclass reprs)."""
    text = "|".join(repr(p) for p in parts)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]


def run_closed_loop(
    scenario: Scenario,
    controller: str = "r2cbf",
    *,
    seed: int = 0,
    variant: str = "full",
    params: VehicleParams | None = None,
    safety: SafetyLimits | None = None,
    noise: SensorNoiseSpec | None = None,
    gains: ControllerGains | None = None,
    duration: float | None = None,
    kkt_recheck: float = KKT_RECHECK_FRACTION,
    prior_scale: float = PRIOR_SIGMA_SCALE,
) -> RunRecord:
    """Simulate one scenario under one controller; returns the full record."""
    if controller not in CONTROLLER_KINDS:
        raise ValueError(f"unknown controller {controller!r}, expected one of {CONTROLLER_KINDS}")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}, expected one of {VARIANTS}")
    params = VehicleParams() if params is None else params
    safety = SafetyLimits() if safety is None else safety
    noise = SensorNoiseSpec() if noise is None else noise
    gains = ControllerGains() if gains is None else gains
    duration = scenario.duration if duration is None else duration

    dt = params.dt_control
    n_steps = int(round(duration / dt))
    path = scenario.path
    mu_field = scenario.mu_field(seed)
    limits = ControlLimits.from_params(params)
    spec = BarrierSpec.from_limits(safety, params)
    kappa_val = 0.0 if variant == "nocvar" else kappa(safety.beta_risk)
    sigma_beta_spec2 = noise.sigma_beta**2

    rng_meas = np.random.default_rng([seed, 101])
    rng_check = np.random.default_rng([seed, 202])

    # conservative prior over the response-noise covariance
    prior_var = (prior_scale * noise.response_sigmas()) ** 2
    iw = iw_init(prior_var, nu0=safety.nu0)
    if iw.lam != safety.forget:
        iw = replace(iw, lam=safety.forget)
    iw_frozen = iw
    uses_bayes = controller == "r2cbf" and variant != "nobayes"

    x0, y0, psi0, vx0 = scenario.initial_pose()
    state = VehicleState(x=x0, y=y0, psi=psi0, vx=vx0, vy=0.0, omega_z=0.0)
    u_prev = np.zeros(7)
    est: RobustEstimatorState | None = None
    ev_prev: float | None = None
    warm: list[int] | None = None
    prev_meas = None
    prev_model = None
    prev_u = None

    record = RunRecord(
        scenario=scenario.name,
        controller=controller,
        variant=variant if controller == "r2cbf" else None,
        seed=seed,
        config_hash=config_fingerprint(scenario, controller, variant, params, safety, noise, gains),
        dt=dt,
    )
    log = np.zeros((n_steps, len(SERIES_COLUMNS)))
    kept = 0

    for k in range(n_steps):
        if state.vx < VX_FLOOR:
            record.diverged = True
            record.diverged_step = k
            record.diverged_reason = f"forward speed fell below {VX_FLOOR} m/s"
            break

        # -- measurement under the still-applied control --------------------
        ax_t, ay_t = body_accelerations(state, u_prev, params, mu_field)
        Fz_t = np.clip(estimate_loads(ax_t, ay_t, params), LOAD_FLOOR, None)
        meas = measure(state, ay_t, Fz_t, noise, rng_meas)

        # -- adaptive noise posterior ---------------------------------------
        if uses_bayes and prev_meas is not None:
            res = prediction_residual(prev_meas.r, meas.r, prev_u, prev_meas.Fz, prev_model, dt)
            iw = iw_update(iw, res)
            if np.linalg.eigvalsh(iw_mean(iw)).min() < -1e-10:
                record.hard_failures.append(f"step {k}: noise posterior mean not PSD")

        # -- controller ------------------------------------------------------
        model = NominalModel(params, vx=state.vx)
        w = load_scale(meas.Fz, spec)
        u_nom = nominal_control(state, path, gains, params, ev_prev=ev_prev, dt=dt)
        # the speed error the tracking law just used, for its derivative term
        x_fa = state.x + params.a * math.cos(state.psi)
        ev_now = path.v_target_at(x_fa) - state.vx
        u_clamped = limits.clamp(u_nom, u_prev)
        diag: FilterDiagnostics | None = None
        fell_back = False

        try:
            if controller == "clf":
                u = u_clamped
            elif controller == "classic":
                lin = linearize_barrier(meas.r, w, state.vx, params)
                dist = barrier_distribution(meas.r, w, sigma_beta_spec2, spec)
                u, diag = classic_cbf_filter(
                    lin, dist.mu_h, u_nom, limits, u_prev=u_prev,
                    alpha_gain=safety.alpha_gain, warm_set=warm,
                )
            elif controller == "robust":
                if est is None:
                    est = RobustEstimatorState.init(meas.r)
                lin = linearize_barrier(meas.r, w, state.vx, params)
                dist = barrier_distribution(meas.r, w, sigma_beta_spec2, spec)
                u, est, diag = robust_cbf_filter(
                    meas.r, meas.Fz, lin, dist.mu_h, u_nom, u_prev, est, model,
                    limits, w, alpha_gain=safety.alpha_gain, warm_set=warm, dt=dt,
                )
            else:
                Sigma_hat = iw_mean(iw_frozen if variant == "nobayes" else iw)
                lin = linearize_barrier(meas.r, w, state.vx, params)
                extra = 0.0
                extra_quad = None
                if variant == "loadvar":
                    try:
                        dist = barrier_distribution_full(
                            meas.r, meas.Fz, Sigma_hat, noise.load_cov(), spec
                        )
                    except SingularLoadRegime:
                        dist = barrier_distribution(meas.r, w, float(Sigma_hat[0, 0]), spec)
                        fell_back = True
                    # Retained load-variance channels: the barrier-value term
                    # converted to rate units by the class-K gain, plus load
                    # noise propagated through the response dynamics into the
                    # barrier rate. The adaptive posterior already absorbs the
                    # latter from residuals, so this variant double-counts it
                    # -- that is the point of the ablation.
                    extra = (safety.alpha_gain**2) * dist.sigma_h2
                    A_load, c_load = rate_load_quadratic(
                        meas.r, meas.Fz, noise.load_cov(), w, model
                    )
                    extra += c_load
                    extra_quad = A_load
                else:
                    dist = barrier_distribution(meas.r, w, float(Sigma_hat[0, 0]), spec)
                u, diag = scp_solve(
                    lin, dist.mu_h, Sigma_hat, u_nom, u_prev, limits,
                    kappa_val=kappa_val, alpha_gain=safety.alpha_gain,
                    warm_set=warm, extra_variance=extra, extra_quad=extra_quad,
                )
        except QPNoConverge as exc:
            record.hard_failures.append(f"step {k}: QP did not converge: {exc}")
            record.diverged = True
            record.diverged_step = k
            record.diverged_reason = "safety-filter QP failure"
            break

        if diag is not None:
            warm = diag.working_set
            record.stall_steps += int(diag.stalled)
            if diag.kkt.worst >= KKT_TOL:
                record.hard_failures.append(
                    f"step {k}: KKT residual {diag.kkt.worst:.2e} above {KKT_TOL}"
                )
            # independent spot re-verification of the optimality certificate
            if diag.problem is not None and rng_check.random() < kkt_recheck:
                res_chk = verify_solution(diag.problem, diag.solution)
                if res_chk.worst >= KKT_TOL:
                    record.hard_failures.append(
                        f"step {k}: re-verified KKT residual {res_chk.worst:.2e}"
                    )
        record.fallback_steps += int(fell_back)

        lo_w, hi_w = limits.window(u_prev)
        if np.any(u < lo_w - 1e-9) or np.any(u > hi_w + 1e-9):
            record.hard_failures.append(f"step {k}: control outside the actuator window")

        # -- log ---------------------------------------------------------------
        pt = path.query(state.x, state.y)
        deviated = bool(np.max(np.abs(u - u_clamped)) > 1e-6)
        log[k] = (
            k * dt, state.x, state.y, state.psi, state.vx, state.vy, state.omega_z,
            state.beta, ay_t, roll_proxy(ay_t, params),
            mu_field.mu_at(state.x, state.y), w,
            pt.e_y, _wrap(state.psi - pt.psi_ref), pt.v_target,
            meas.r[0], meas.r[1], meas.r[2],
            *u, u_nom[0],
            0.0 if diag is None else diag.xi,
            0.0 if diag is None else diag.sigma_param,
            0.0 if diag is None else diag.margin,
            0 if diag is None else diag.iterations,
            0.0 if diag is None else diag.kkt.worst,
            float(diag.constraint_active) if diag is not None else 0.0,
            float(deviated),
            float(diag.stalled) if diag is not None else 0.0,
            diag.backtracks if diag is not None else 0,
        )
        kept = k + 1

        # -- plant -------------------------------------------------------------
        try:
            state = step_plant(state, u, params, mu_field, dt)
        except Exception as exc:  # PlantStall: vehicle lost forward motion
            record.diverged = True
            record.diverged_step = k
            record.diverged_reason = str(exc)
            break
        if not np.all(np.isfinite(state.as_array())) or abs(state.beta) > math.pi / 2:
            record.diverged = True
            record.diverged_step = k
            record.diverged_reason = "state non-finite or |beta| beyond 90 deg"
            break

        ev_prev = ev_now
        prev_meas, prev_model, prev_u = meas, model, u
        u_prev = u

    record.series = {name: log[:kept, j].copy() for j, name in enumerate(SERIES_COLUMNS)}
    record.metrics = compute_metrics(record.series, safety) if kept else None
    return record


def _wrap(a: float) -> float:
    return float(math.remainder(a, 2.0 * math.pi))


def compute_metrics(series: dict[str, np.ndarray], safety: SafetyLimits) -> MetricsReport:
    """Summarize a (possibly truncated) run into the standard metric set."""
    beta_pk = float(np.max(np.abs(series["beta"])))
    omega_pk = float(np.max(np.abs(series["omega"])))
    ay_pk = float(np.max(np.abs(series["ay"])))
    phi_pk = float(np.max(np.abs(series["phi"])))
    margins = {
        "beta": (1.0 - beta_pk / safety.beta_lim) * 100.0,
        "omega": (1.0 - omega_pk / safety.omega_lim) * 100.0,
        "ay": (1.0 - ay_pk / safety.ay_lim) * 100.0,
        "phi": (1.0 - phi_pk / safety.phi_lim) * 100.0,
    }
    n = series["t"].size
    n_dev = int(np.sum(series["deviated"] > 0.5))
    n_act = int(np.sum(series["active"] > 0.5))
    return MetricsReport(
        beta_max_deg=math.degrees(beta_pk),
        omega_max_deg=math.degrees(omega_pk),
        ay_max=ay_pk,
        phi_max_deg=math.degrees(phi_pk),
        margin_beta=margins["beta"],
        margin_omega=margins["omega"],
        margin_ay=margins["ay"],
        margin_phi=margins["phi"],
        margin_min=min(margins.values()),
        rms_ey=float(np.sqrt(np.mean(series["e_y"] ** 2))),
        rms_epsi_deg=math.degrees(float(np.sqrt(np.mean(series["e_psi"] ** 2)))),
        rho_cbf=100.0 * n_dev / n,
        n_steps=n,
        n_active=n_act,
        n_deviated=n_dev,
    )


# ---------------------------------------------------------------------------
# batches: controller comparisons and ablations over seeds
# ---------------------------------------------------------------------------

def _run_task(task: dict) -> RunRecord:
    return run_closed_loop(task.pop("scenario"), task.pop("controller"), **task)


def run_batch(tasks: list[dict], workers: int | None = None) -> list[RunRecord]:
    """Run independent closed-loop tasks, fanned out across processes."""
    tasks = [dict(t) for t in tasks]
    if workers is None:
        workers = min(len(tasks), os.cpu_count() or 1)
    if workers <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    ctx = mp.get_context("fork")
    with ctx.Pool(workers) as pool:
        return pool.map(_run_task, tasks, chunksize=1)


def controller_suite(
    scenario: Scenario,
    seeds,
    controllers=CONTROLLER_KINDS,
    workers: int | None = None,
    **kwargs,
) -> dict[str, list[RunRecord]]:
    """All controllers over all seeds; returns records grouped by controller."""
    seeds = list(seeds)
    tasks = [
        {"scenario": scenario, "controller": c, "seed": s, **kwargs}
        for c in controllers
        for s in seeds
    ]
    records = run_batch(tasks, workers)
    per = len(seeds)
    return {c: records[i * per:(i + 1) * per] for i, c in enumerate(controllers)}


def ablation_suite(
    scenario: Scenario,
    seeds,
    variants=VARIANTS,
    workers: int | None = None,
    **kwargs,
) -> dict[str, list[RunRecord]]:
    """The risk-aware controller under each design ablation, per seed."""
    seeds = list(seeds)
    tasks = [
        {"scenario": scenario, "controller": "r2cbf", "variant": v, "seed": s, **kwargs}
        for v in variants
        for s in seeds
    ]
    records = run_batch(tasks, workers)
    per = len(seeds)
    return {v: records[i * per:(i + 1) * per] for i, v in enumerate(variants)}


def median_metrics(records: list[RunRecord]) -> dict[str, float]:
    """Entrywise median of the metric table across seeds."""
    rows = [r.metrics.as_dict() for r in records if r.metrics is not None]
    if not rows:
        raise ValueError("no completed runs to aggregate")
    return {k: float(np.median([row[k] for row in rows])) for k in rows[0]}


# ---------------------------------------------------------------------------
# Monte Carlo validation of the risk calibration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SafetyValidation:
    n_trials: int
    kappa: float
    bound: float            # Phi(-kappa), the calibrated violation probability
    rate: float             # empirical violation frequency
    se: float               # binomial standard error at the bound
    slack_sigmas: float

    @property
    def consistent(self) -> bool:
        """At equality: within 3 SE of the bound; with slack: below it."""
        if self.slack_sigmas == 0.0:
            return abs(self.rate - self.bound) <= 3.0 * self.se
        return self.rate <= self.bound + 3.0 * self.se


def mc_safety_validation(
    beta_risk: float = 0.05,
    n_trials: int = 100_000,
    *,
    sigma: float = 1.0,
    slack_sigmas: float = 0.0,
    seed: int = 0,
) -> SafetyValidation:
    """Sample the barrier-rate constraint at its designed operating point.

    The controller drives L_h u + b_h + k mu_h to kappa * sigma; the realized
    constraint value is that mean plus zero-mean Gaussian response noise, so
    the violation frequency must match Phi(-kappa) (with slack_sigmas > 0 it
    must fall below). Pure statistics, no vehicle in the loop: this validates
    the risk calibration itself.
    """
    kap = kappa(beta_risk)
    rng = np.random.default_rng([seed, 4040])
    samples = rng.normal((kap + slack_sigmas) * sigma, sigma, n_trials)
    rate = float(np.mean(samples < 0.0))
    bound = tail_bound(kap)
    se = math.sqrt(bound * (1.0 - bound) / n_trials)
    return SafetyValidation(
        n_trials=n_trials, kappa=kap, bound=bound, rate=rate, se=se,
        slack_sigmas=slack_sigmas,
    )


# ---------------------------------------------------------------------------
# artifacts: per-run time series, metric summaries, comparison tables
# ---------------------------------------------------------------------------

def _header_comments(record: RunRecord) -> list[str]:
    return [
        f"# config = {record.config_hash}",
        f"# scenario = {record.scenario}, controller = {record.controller}"
        + (f", variant = {record.variant}" if record.variant else "")
        + f", seed = {record.seed}",
    ]


def write_series_csv(path, record: RunRecord) -> None:
    lines = _header_comments(record)
    lines.append(",".join(SERIES_COLUMNS))
    cols = [record.series[c] for c in SERIES_COLUMNS]
    for row in zip(*cols):
        lines.append(",".join(f"{v:.10g}" for v in row))
    _write_lines(path, lines)


def write_metrics_kv(path, record: RunRecord) -> None:
    lines = _header_comments(record)
    lines.append(f"diverged = {record.diverged}")
    if record.diverged:
        lines.append(f"diverged_step = {record.diverged_step}")
        lines.append(f"diverged_reason = {record.diverged_reason}")
    lines.append(f"stall_steps = {record.stall_steps}")
    lines.append(f"hard_failures = {len(record.hard_failures)}")
    if record.metrics is not None:
        for key, val in record.metrics.as_dict().items():
            lines.append(f"{key} = {val:.10g}")
    _write_lines(path, lines)


def write_comparison_csv(path, rows: list[dict], comments=()) -> None:
    """Generic table writer: one dict per row, shared keys become the header."""
    if not rows:
        raise ValueError("no rows to write")
    keys = list(rows[0])
    lines = [str(c) for c in comments]
    lines.append(",".join(keys))
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in keys))
    _write_lines(path, lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


def _write_lines(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
