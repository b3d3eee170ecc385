"""Scripted studies built on the integrators.

Each ``run_*`` function takes an :class:`ExperimentConfig` and returns a
report whose ``rows`` become one CSV table and whose ``summary`` lands in
the run manifest.  Every report carries the config hash, seed, package
version and the hypothesis-audit warnings of the configured problem.
"""

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import __version__
from .dynamics import FHN_SLOW, fhn_problem, hypothesis_audit, HypothesisConstants
from .errors import BlowUpError, ParameterError
from .integrators import (
    FastExactStepper,
    empirical_deviation,
    exact_averaged_model,
    fhn_averaged_model,
    integrate_averaged,
    integrate_deviation,
    integrate_slow_fast,
    lyapunov_variance,
)
from .noise import derive_stream
from .spectral import evaluate

__all__ = [
    "StudyFailure",
    "Report",
    "ConvergenceReport",
    "worker_count",
    "problem_from_config",
    "run_simulation",
    "run_averaged",
    "run_deviation",
    "run_convergence_study",
    "run_bifurcation_sweep",
    "run_variance_scaling",
    "run_mixing_check",
    "run_speedup_benchmark",
    "run_gaussianity_check",
    "run_audit",
    "BIFURCATION_THRESHOLD",
]

BIFURCATION_THRESHOLD = math.pi / 2 ** 1.25


class StudyFailure(RuntimeError):
    """Too many replicas blew up for the study to be meaningful."""


@dataclass
class Report:
    name: str
    header: tuple
    rows: list
    summary: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)


@dataclass
class ConvergenceReport(Report):
    epsilons: tuple = ()
    sup_errors: np.ndarray = None
    slope: float = float("nan")
    slope_stderr: float = float("nan")
    slope_ci: tuple = (float("nan"), float("nan"))
    constant: float = float("nan")
    kappa: float = 0.05
    quantile_constant: float = float("nan")


def worker_count():
    """Worker cap from AVG_SPDE_THREADS (0 or unset: one per CPU)."""
    raw = os.environ.get("AVG_SPDE_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ParameterError(f"AVG_SPDE_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise ParameterError("AVG_SPDE_THREADS must be >= 0")
    return n or (os.cpu_count() or 1)


def _ordered_map(fn, items):
    """Map preserving input order; results do not depend on the worker count."""
    items = list(items)
    n = min(worker_count(), len(items))
    if n <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def problem_from_config(cfg, L=None, epsilon=None):
    p = fhn_problem(
        L=cfg.L if L is None else L,
        N=cfg.N,
        epsilon=cfg.epsilon if epsilon is None else epsilon,
        sigma1=cfg.sigma1,
        sigma2=cfg.sigma2,
        q1=(cfg.q1_kind, cfg.q1_power),
        q2=(cfg.q2_kind, cfg.q2_power),
        u0_amplitude=cfg.u0_amplitude,
    )
    k = HypothesisConstants(C_f=cfg.C_f, C_g=cfg.C_g, a=cfg.a, b=cfg.b, c=cfg.c, d=cfg.d, e=cfg.e)
    return p.with_(constants=k)


def _meta(cfg, problem=None):
    problem = problem_from_config(cfg) if problem is None else problem
    audit = hypothesis_audit(problem)
    return {
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "version": __version__,
        "audit_warnings": audit.warnings,
    }


def _averaged_model(p):
    if not p.f.depends_on_y:
        return exact_averaged_model(p)
    if p.f is FHN_SLOW and p.g.is_unit_linear_fast:
        return fhn_averaged_model(p.grid, p.Q2, p.sigma1, p.Q1, p.sigma2)
    raise ParameterError(f"no averaged model available for drift {p.f.name!r}")


def _mid(coeffs, grid):
    return evaluate(coeffs, grid, 0.0)


def _trajectory_rows(traj, record_modes, with_v=True):
    grid = traj.grid
    K = min(record_modes, grid.n_modes)
    u_mid = _mid(traj.u, grid)
    u_norm = traj.h_norm("u")
    if with_v and traj.v is not None:
        v_mid = _mid(traj.v, grid)
        v_norm = traj.h_norm("v")
    else:
        v_mid = v_norm = np.full(len(traj.times), np.nan)
    rows = []
    for i, t in enumerate(traj.times):
        rows.append((t, u_mid[i], v_mid[i], u_norm[i], v_norm[i]) + tuple(traj.u[i, :K]))
    header = ("t", "u_mid", "v_mid", "u_h_norm", "v_h_norm") + tuple(f"c_{k}" for k in range(1, K + 1))
    return header, rows


def run_simulation(cfg):
    """Single path of the coupled system (trajectory.csv)."""
    p = problem_from_config(cfg)
    traj = integrate_slow_fast(
        p, cfg.T, cfg.dt, cfg.output_stride, seed=cfg.seed, v0=_v0_mode(cfg),
        fast_stepper=cfg.fast_stepper, theta=cfg.theta,
    )
    header, rows = _trajectory_rows(traj, cfg.record_modes)
    u_mid = _mid(traj.u, p.grid)
    summary = {"u_mid_rms": float(np.sqrt(np.mean(u_mid**2))), "steps": traj.steps}
    return Report("trajectory", header, rows, summary, _meta(cfg, p), {"trajectory": traj})


def run_averaged(cfg):
    p = problem_from_config(cfg)
    m = _averaged_model(p)
    traj = integrate_averaged(m, p.u0, cfg.T, cfg.dt, cfg.output_stride, seed=cfg.seed)
    header, rows = _trajectory_rows(traj, cfg.record_modes, with_v=False)
    summary = {"u_mid_final": float(_mid(traj.u[-1], p.grid)), "provenance": m.provenance}
    return Report("trajectory", header, rows, summary, _meta(cfg, p), {"trajectory": traj})


def run_deviation(cfg):
    """Limit deviation process about the averaged path started at u0."""
    p = problem_from_config(cfg)
    m = _averaged_model(p)
    u_path = _deterministic_averaged_path(m, p.u0, cfg.T, cfg.dt)
    traj = integrate_deviation(m, u_path, cfg.T, cfg.dt, cfg.output_stride, seed=cfg.seed)
    header, rows = _trajectory_rows(traj, cfg.record_modes, with_v=False)
    z_mid = _mid(traj.u, p.grid)
    burn = traj.times >= cfg.burn_in
    summary = {"z_mid_variance": float(np.var(z_mid[burn])), "provenance": m.provenance}
    return Report("trajectory", header, rows, summary, _meta(cfg, p), {"trajectory": traj})


def _deterministic_averaged_path(m, u0, T, dt):
    if not np.any(u0):
        return np.zeros_like(u0)
    if m.sigma1 != 0:
        raise ParameterError("deviation about a stochastic averaged path needs that path explicitly")
    return integrate_averaged(m, u0, T, dt, 1)


def _v0_mode(cfg):
    return "stationary" if cfg.v0 == "stationary" else "given"


def _check_epsilon_grid(eps):
    if len(eps) < 4:
        raise ParameterError("convergence study needs at least 4 epsilon values")
    if max(eps) / min(eps) < 10 - 1e-9:
        raise ParameterError("epsilon grid must span at least one decade")


def _fit_loglog(x, y):
    """Least-squares log y = a + b log x; returns (b, a)."""
    b, a = np.polyfit(np.log(x), np.log(y), 1)
    return float(b), float(a)


def run_convergence_study(cfg, problem=None):
    """Sup-norm error of u^eps against the averaged path over an epsilon grid."""
    eps = tuple(cfg.epsilons)
    _check_epsilon_grid(eps)
    base = problem_from_config(cfg) if problem is None else problem
    R = cfg.replicas
    reps = list(range(R))

    def one(e):
        p = base.with_(epsilon=e)
        m = _averaged_model(p)
        direct = integrate_slow_fast(
            p, cfg.T, cfg.dt, cfg.output_stride, seed=cfg.seed, replicas=reps,
            v0=_v0_mode(cfg), fast_stepper=cfg.fast_stepper, theta=cfg.theta,
        )
        if m.sigma1 == 0:
            avg = integrate_averaged(m, p.u0, cfg.T, cfg.dt, cfg.output_stride)
            ua = avg.u[:, None, :]
        else:
            avg = integrate_averaged(m, p.u0, cfg.T, cfg.dt, cfg.output_stride, seed=cfg.seed, replicas=reps)
            ua = avg.u
        err = np.sqrt(np.sum((direct.u - ua) ** 2, axis=-1)).max(axis=0)
        ok = direct.ok
        if avg.blowup_times is not None:
            ok = ok & ~np.isfinite(avg.blowup_times)
        return np.where(ok, err, np.nan)

    errors = np.array(_ordered_map(one, eps))  # (n_eps, R)
    blown = int(np.sum(~np.isfinite(errors)))
    if blown > 0.05 * errors.size:
        raise StudyFailure(f"{blown} of {errors.size} replicas blew up")
    med = np.array([np.nanmedian(r) for r in errors])
    eps_arr = np.array(eps)
    if np.all(med == 0):
        slope = intercept = float("nan")
    else:
        slope, intercept = _fit_loglog(eps_arr, med)

    # bootstrap over replicas for the slope uncertainty
    rng = np.random.default_rng([cfg.seed, 0x5EED])
    boot = []
    if np.all(med > 0):
        for _ in range(400):
            idx = rng.integers(0, R, size=(len(eps), R))
            bm = np.array([np.nanmedian(errors[i, idx[i]]) for i in range(len(eps))])
            if np.all(bm > 0):
                boot.append(_fit_loglog(eps_arr, bm)[0])
    se = float(np.std(boot, ddof=1)) if len(boot) > 1 else float("nan")
    scaled = (errors / np.sqrt(eps_arr)[:, None]).ravel()
    scaled = scaled[np.isfinite(scaled)]
    qconst = float(np.quantile(scaled, 1 - cfg.kappa)) if scaled.size else float("nan")

    rows = [(e, r, errors[i, r]) for i, e in enumerate(eps) for r in range(R)]
    summary = {
        "slope": slope,
        "slope_stderr": se,
        "slope_ci95": [slope - 1.96 * se, slope + 1.96 * se],
        "constant": math.exp(intercept) if math.isfinite(intercept) else float("nan"),
        "kappa": cfg.kappa,
        "quantile_constant": qconst,
        "median_sup_error": med.tolist(),
        "blown_up": blown,
    }
    return ConvergenceReport(
        "convergence", ("epsilon", "replica", "sup_error"), rows, summary, _meta(cfg, base),
        epsilons=eps, sup_errors=errors, slope=slope, slope_stderr=se,
        slope_ci=tuple(summary["slope_ci95"]), constant=summary["constant"],
        kappa=cfg.kappa, quantile_constant=qconst,
    )


def run_bifurcation_sweep(cfg):
    """Direct RMS of u(0, t) and averaged steady mid-amplitude across L."""
    Ls = tuple(cfg.L_grid)
    if not Ls:
        raise ParameterError("empty L grid")
    reps = list(range(cfg.replicas))

    def one(L):
        p = problem_from_config(cfg, L=L)
        m = _averaged_model(p)
        try:
            direct = integrate_slow_fast(
                p, cfg.T, cfg.dt, cfg.output_stride, seed=cfg.seed, replicas=reps,
                v0=_v0_mode(cfg), fast_stepper=cfg.fast_stepper, theta=cfg.theta,
            )
            keep = direct.times >= cfg.burn_in
            mid = _mid(direct.u[keep], p.grid)[:, direct.ok]
            rms = float(np.sqrt(np.mean(mid**2))) if mid.size else float("nan")
        except BlowUpError:
            rms = float("nan")
        avg = integrate_averaged(m, p.u0, cfg.T, cfg.dt_surrogate, max(1, int(round(cfg.T / cfg.dt_surrogate))))
        amp = abs(float(_mid(avg.u[-1], p.grid)))
        return (L, rms, amp)

    rows = _ordered_map(one, Ls)
    below = [r[2] for r in rows if r[0] < BIFURCATION_THRESHOLD]
    above = [r[2] for r in rows if r[0] > BIFURCATION_THRESHOLD]
    summary = {
        "threshold": BIFURCATION_THRESHOLD,
        "max_amp_below_threshold": max(below) if below else None,
        "min_amp_above_threshold": min(above) if above else None,
        "blown_up_rows": sum(1 for r in rows if not math.isfinite(r[1])),
    }
    return Report("bifurcation", ("L", "rms_direct", "amp_averaged"), rows, summary, _meta(cfg))


def run_variance_scaling(cfg):
    """Variance of u^eps(0, t) against the deviation surrogate over an epsilon grid."""
    eps = tuple(cfg.epsilons)
    if not eps:
        raise ParameterError("empty epsilon grid")
    R = cfg.replicas
    base = problem_from_config(cfg).with_(u0=np.zeros(cfg.N))
    m = _averaged_model(base)

    def one(item):
        i, e = item
        reps = list(range(i * R, (i + 1) * R))
        p = base.with_(epsilon=e)
        direct = integrate_slow_fast(
            p, cfg.T, cfg.dt, cfg.output_stride, seed=cfg.seed, replicas=reps,
            v0=_v0_mode(cfg), fast_stepper=cfg.fast_stepper, theta=cfg.theta,
        )
        keep = direct.times >= cfg.burn_in
        mid = _mid(direct.u[keep], p.grid)[:, direct.ok]
        var_direct = float(np.mean((mid - mid.mean()) ** 2))
        stride = max(1, int(round(cfg.dt * cfg.output_stride / cfg.dt_surrogate)))
        z = integrate_deviation(m, np.zeros(cfg.N), cfg.T, cfg.dt_surrogate, stride, seed=cfg.seed, replicas=reps)
        keep = z.times >= cfg.burn_in
        zm = math.sqrt(e) * _mid(z.u[keep], p.grid)
        var_sur = float(np.mean((zm - zm.mean()) ** 2))
        return (e, var_direct, var_sur)

    rows = _ordered_map(one, list(enumerate(eps)))
    summary = {}
    if len(eps) >= 2:
        e_arr = np.array([r[0] for r in rows])
        for label, col in (("direct", 1), ("surrogate", 2)):
            std = np.sqrt([r[col] for r in rows])
            if np.all(std > 0):
                beta, a = _fit_loglog(e_arr, std)
                summary[f"beta_{label}"] = beta
                summary[f"c_{label}"] = math.exp(a)
        if "c_direct" in summary and "c_surrogate" in summary:
            summary["c_relative_difference"] = abs(summary["c_direct"] - summary["c_surrogate"]) / summary["c_surrogate"]
    return Report("variance", ("epsilon", "var_direct", "var_surrogate"), rows, summary, _meta(cfg, base))


def run_mixing_check(cfg):
    """One-step pathwise contraction of two fast paths sharing their noise."""
    p = problem_from_config(cfg)
    grid = p.grid
    stepper = FastExactStepper(grid, cfg.dt, p.epsilon, p.sigma2, p.Q2)
    s_a = derive_stream(cfg.seed, "fast-noise", 0)
    xi = s_a.normals(grid.n_modes)
    one_plus = 1 + grid.eigenvalues
    va = p.u0 / one_plus + abs(p.sigma2) * np.sqrt(p.Q2.mode_variances / (2 * one_plus)) * xi
    diff0 = np.ones(grid.n_modes)  # sum_k phi_k: every mode differs by one unit
    vb = va + diff0
    xi_step = s_a.normals(grid.n_modes)
    va1 = stepper(va, p.u0, xi_step)
    vb1 = stepper(vb, p.u0, xi_step)
    measured = (vb1 - va1) / diff0
    exact = np.exp(-(1 + grid.eigenvalues) * cfg.dt / p.epsilon)
    bound = math.exp(-(grid.lambda1 - cfg.C_g) * cfg.dt / p.epsilon)
    rows = [
        (k + 1, measured[k], exact[k], bound, int(measured[k] <= bound))
        for k in range(grid.n_modes)
    ]
    summary = {
        "max_abs_deviation_from_exact": float(np.max(np.abs(measured - exact))),
        "bound": bound,
        "all_satisfied": bool(np.all(measured <= bound)),
    }
    return Report("mixing", ("mode", "measured", "exact", "bound", "satisfied"), rows, summary, _meta(cfg, p))


def run_speedup_benchmark(cfg):
    """Wall time of the direct system against averaged plus deviation runs."""
    eps = tuple(cfg.epsilons)
    base = problem_from_config(cfg)
    rows = []
    steps = []
    for e in eps:
        p = base.with_(epsilon=e)
        m = _averaged_model(p)
        t_direct = math.inf
        for _ in range(cfg.bench_repeats):
            t0 = time.perf_counter()
            direct = integrate_slow_fast(
                p, cfg.T, cfg.dt, max(1, int(round(cfg.T / cfg.dt))), seed=cfg.seed,
                v0=_v0_mode(cfg), fast_stepper=cfg.fast_stepper, theta=cfg.theta,
            )
            t_direct = min(t_direct, time.perf_counter() - t0)
        t_sur = math.inf
        n_out = max(1, int(round(cfg.T / cfg.dt_surrogate)))
        for _ in range(cfg.bench_repeats):
            t0 = time.perf_counter()
            avg = integrate_averaged(m, p.u0, cfg.T, cfg.dt_surrogate, 1, seed=cfg.seed)
            dev = integrate_deviation(m, avg if m.sigma1 == 0 else p.u0, cfg.T, cfg.dt_surrogate, n_out, seed=cfg.seed)
            t_sur = min(t_sur, time.perf_counter() - t0)
        rows.append((e, t_direct, t_sur, t_direct / t_sur))
        steps.append({"epsilon": e, "direct_steps": direct.steps, "surrogate_steps": avg.steps + dev.steps})
    summary = {"steps": steps}
    return Report("bench", ("epsilon", "t_direct_s", "t_surrogate_s", "ratio"), rows, summary, _meta(cfg, base))


def run_gaussianity_check(cfg):
    """KS test of mode-1 samples of z^eps(T) and z(T) against the Lyapunov law."""
    if cfg.replicas < 128:
        raise ParameterError("gaussianity check needs at least 128 replicas")
    base = problem_from_config(cfg).with_(u0=np.zeros(cfg.N))
    grid = base.grid
    m = _averaged_model(base)
    # z about u = 0: drift multiplier fbar'(0) is constant; mode 1 decouples
    mult0 = float(m.fbar_prime(np.zeros(1))[0])
    rate = grid.lambda1 - mult0
    v_star = lyapunov_variance(m.sqrtB[0], rate) if rate > 0 else float("nan")
    reps = list(range(cfg.replicas))
    header = ("epsilon", "ks_statistic", "p_value", "sample_variance", "reference_variance", "degenerate")
    rows = []

    def test(samples):
        if v_star <= 0 or not math.isfinite(v_star) or np.all(samples == 0):
            return (float("nan"), float("nan"), float(np.var(samples)), v_star, 1)
        res = stats.kstest(samples, "norm", args=(0.0, math.sqrt(v_star)))
        return (float(res.statistic), float(res.pvalue), float(np.var(samples)), v_star, 0)

    for e in cfg.epsilons:
        p = base.with_(epsilon=e)
        direct = integrate_slow_fast(
            p, cfg.T, cfg.dt, int(round(cfg.T / cfg.dt)), seed=cfg.seed, replicas=reps,
            v0=_v0_mode(cfg), fast_stepper=cfg.fast_stepper, theta=cfg.theta,
        )
        avg = integrate_averaged(m, p.u0, cfg.T, cfg.dt, int(round(cfg.T / cfg.dt)))
        z = empirical_deviation(direct, avg, e)
        rows.append((e,) + test(z.u[-1, direct.ok, 0]))
    zl = integrate_deviation(m, np.zeros(cfg.N), cfg.T, cfg.dt_surrogate, int(round(cfg.T / cfg.dt_surrogate)),
                             seed=cfg.seed, replicas=reps)
    rows.append((0.0,) + test(zl.u[-1, :, 0]))
    summary = {
        "reference_variance": v_star,
        "min_p_value": min((r[2] for r in rows if not r[5]), default=None),
        "limit_row_epsilon": 0.0,
    }
    return Report("gaussianity", header, rows, summary, _meta(cfg, base))


def run_audit(cfg):
    p = problem_from_config(cfg)
    audit = hypothesis_audit(p)
    rows = [(e.hypothesis, e.status, e.detail) for e in audit.entries]
    summary = {"fitted": audit.fitted, "lambda1": p.grid.lambda1}
    return Report("audit", ("hypothesis", "status", "detail"), rows, summary, _meta(cfg, p))
