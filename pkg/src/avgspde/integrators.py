"""Time integration of the coupled, averaged and deviation dynamics.

All steppers are exponential Euler: the diagonal linear part is integrated
exactly, reaction terms are frozen over a step, and the stochastic
convolution is sampled with its exact per-mode variance.  States carry a
trailing mode axis and an optional leading replica axis; ensembles advance
in lock-step, each replica drawing from its own stream.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    BLOWUP_THRESHOLD,
    FHN_SLOW,
    DriftSpec,
    SlowFastProblem,
    drift_with_mask,
    eval_drift,
    padded_values,
    pointwise_product,
    project_padded,
)
from .errors import BlowUpError, ParameterError, UnsupportedFormError
from .noise import CovarianceSpec, derive_streams, draw_block
from .spectral import EigenGrid, apply_diagonal, evaluate, resolvent_power, sobolev_norm

__all__ = [
    "Trajectory",
    "AveragedModel",
    "SlowStepper",
    "FastExactStepper",
    "FastGeneralStepper",
    "step_slow",
    "step_fast_exact_linear",
    "step_fast_general",
    "sample_stationary_linear",
    "integrate_slow_fast",
    "integrate_averaged",
    "integrate_deviation",
    "empirical_deviation",
    "fbar_closed_fhn",
    "sqrtB_closed_fhn",
    "fhn_averaged_model",
    "exact_averaged_model",
    "FbarEstimate",
    "estimate_fbar",
    "BEstimate",
    "estimate_B",
    "lyapunov_variance",
]

CHUNK = 512
THETA = 0.1


def _phi1(rate, dt):
    """(1 - exp(-rate dt)) / rate, continuous at rate = 0."""
    rate = np.asarray(rate, dtype=float)
    x = rate * dt
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(np.abs(x) > 1e-8, -np.expm1(-x) / np.where(rate == 0, 1, rate), dt * (1 - x / 2))
    return out


def _conv_variance(rate, dt):
    """Variance of int_0^dt exp(-rate s) dW(s), i.e. (1 - exp(-2 rate dt)) / (2 rate)."""
    return _phi1(2.0 * np.asarray(rate, dtype=float), dt)


# --------------------------------------------------------------------------
# single-step kernels


class SlowStepper:
    """du = [A u + drift] dt + sigma dW, exponential Euler with exact noise.

    ``noise_factor`` is either the per-mode sqrt of the covariance (diagonal
    case) or a dense square-root factor S with covariance S S^T.
    """

    def __init__(self, grid, dt, sigma, noise_factor):
        if not dt > 0:
            raise ParameterError(f"time step must be positive, got {dt}")
        lam = grid.eigenvalues
        self.grid = grid
        self.dt = dt
        self.decay = np.exp(-lam * dt)
        self.gain = _phi1(lam, dt)
        self.sigma = float(sigma)
        factor = np.asarray(noise_factor, dtype=float)
        self.dense = factor.ndim == 2
        if self.dense:
            cov = factor @ factor.T
            rate_sum = lam[:, None] + lam[None, :]
            conv = cov * _phi1(rate_sum, dt)
            w, V = np.linalg.eigh(0.5 * (conv + conv.T))
            self.noise_matrix = self.sigma * (V * np.sqrt(np.clip(w, 0, None)))
            self.noisy = bool(np.any(self.noise_matrix != 0))
        else:
            self.noise_std = np.abs(self.sigma) * factor * np.sqrt(_conv_variance(lam, dt))
            self.noisy = bool(np.any(self.noise_std != 0))

    def noise(self, xi):
        if self.dense:
            return xi @ self.noise_matrix.T
        return self.noise_std * xi

    def __call__(self, u, drift, xi=None):
        out = self.decay * u + self.gain * drift
        if xi is not None and self.noisy:
            out = out + self.noise(xi)
        return out


class FastExactStepper:
    """Exact OU update for dv = (1/eps)[A v - v + u] dt + sigma2/sqrt(eps) dW."""

    def __init__(self, grid, dt, epsilon, sigma2, cov):
        if not dt > 0 or not epsilon > 0:
            raise ParameterError("dt and epsilon must be positive")
        one_plus = 1.0 + grid.eigenvalues
        mu = one_plus / epsilon
        self.decay = np.exp(-mu * dt)
        self.gain = -np.expm1(-mu * dt) / one_plus
        self.noise_std = np.abs(sigma2) * np.sqrt(
            cov.mode_variances * -np.expm1(-2 * mu * dt) / (2 * one_plus)
        )
        self.noisy = bool(np.any(self.noise_std != 0))
        self.n_sub = 1

    def __call__(self, v, u, xi=None):
        out = self.decay * v + self.gain * u
        if xi is not None and self.noisy:
            out = out + self.noise_std * xi
        return out


def n_substeps(dt, epsilon, theta=THETA):
    return max(1, math.ceil(dt / (theta * epsilon) - 1e-9))


class FastGeneralStepper:
    """Substepped exponential Euler for dv = (1/eps)[A v + g(u, v)] dt + noise."""

    def __init__(self, grid, dt, epsilon, sigma2, cov, g, theta=THETA):
        if not dt > 0 or not epsilon > 0:
            raise ParameterError("dt and epsilon must be positive")
        self.grid = grid
        self.g = g
        self.n_sub = n_substeps(dt, epsilon, theta)
        h = dt / self.n_sub
        rate = grid.eigenvalues / epsilon
        self.decay = np.exp(-rate * h)
        self.gain = _phi1(grid.eigenvalues, h / epsilon)
        self.noise_std = np.abs(sigma2) * np.sqrt(
            cov.mode_variances * _conv_variance(grid.eigenvalues, h / epsilon)
        )
        self.noisy = bool(np.any(self.noise_std != 0))

    def __call__(self, v, u, xi=None):
        """``xi`` has shape (..., n_sub, N); substep i uses xi[..., i, :]."""
        for i in range(self.n_sub):
            gv, bad = drift_with_mask(self.g, u, v, self.grid)
            if bad is not None and np.any(bad):
                raise BlowUpError(f"fast drift {self.g.name!r} blew up")
            v = self.decay * v + self.gain * gv
            if xi is not None and self.noisy:
                v = v + self.noise_std * xi[..., i, :]
        return v


def step_slow(u, drift, dt, sigma1, Q1, stream, grid):
    """One exponential-Euler step of the slow equation (draws N normals)."""
    stepper = SlowStepper(grid, dt, sigma1, Q1.sqrt_variances)
    xi = stream.normals(grid.n_modes)
    return stepper(np.asarray(u, float), np.asarray(drift, float), xi)


def step_fast_exact_linear(v, u, dt, epsilon, sigma2, Q2, stream, grid):
    """Distributionally exact fast step for g(u, v) = u - v."""
    stepper = FastExactStepper(grid, dt, epsilon, sigma2, Q2)
    xi = stream.normals(grid.n_modes)
    return stepper(np.asarray(v, float), np.asarray(u, float), xi)


def step_fast_general(v, u, dt, epsilon, sigma2, Q2, g_drift, stream, grid, theta=THETA):
    stepper = FastGeneralStepper(grid, dt, epsilon, sigma2, Q2, g_drift, theta)
    xi = stream.normals(stepper.n_sub * grid.n_modes).reshape(stepper.n_sub, grid.n_modes)
    return stepper(np.asarray(v, float), np.asarray(u, float), xi)


def _stationary_moments(u, sigma2, Q2, grid):
    one_plus = 1.0 + grid.eigenvalues
    mean = np.asarray(u, float) / one_plus
    std = np.abs(sigma2) * np.sqrt(Q2.mode_variances / (2 * one_plus))
    return mean, std


def sample_stationary_linear(u, sigma2, Q2, grid, stream, g=None):
    """Exact draw from the stationary law of the fast equation with u frozen."""
    if g is not None and not g.is_unit_linear_fast:
        raise UnsupportedFormError(f"no closed-form stationary law for fast drift {g.name!r}")
    mean, std = _stationary_moments(u, sigma2, Q2, grid)
    return mean + std * stream.normals(grid.n_modes)


# --------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    """Recorded snapshots; ``u``/``v`` have shape (n_times, [replicas,] N).

    ``blowup_times`` holds, per replica, the time a replica left the
    admissible range (NaN if it never did); such replicas are frozen at zero
    from then on and must be excluded by the caller.
    """

    grid: EigenGrid
    times: np.ndarray
    u: np.ndarray
    v: np.ndarray = None
    blowup_times: np.ndarray = None
    steps: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    @property
    def ok(self):
        """Per-replica mask of replicas that never blew up."""
        if self.blowup_times is None:
            return np.ones(self.u.shape[1] if self.u.ndim == 3 else 1, bool)
        return ~np.isfinite(np.atleast_1d(self.blowup_times))

    def mid(self, which="u"):
        """Values at x = 0 of the recorded field."""
        a = self.u if which == "u" else self.v
        return evaluate(a, self.grid, 0.0)

    def h_norm(self, which="u"):
        a = self.u if which == "u" else self.v
        return sobolev_norm(a, self.grid, 0.0)

    def replica(self, i):
        """Single-replica view of an ensemble trajectory."""
        return Trajectory(
            self.grid,
            self.times,
            self.u[:, i],
            None if self.v is None else self.v[:, i],
            None if self.blowup_times is None else self.blowup_times[i],
            self.steps,
            dict(self.meta),
        )


def _n_steps(T, dt):
    if not T > 0 or not dt > 0:
        raise ParameterError("T and dt must be positive")
    n = int(round(T / dt))
    if n < 1 or abs(n * dt - T) > 1e-9 * max(1.0, T):
        raise ParameterError(f"T={T} is not an integer multiple of dt={dt}")
    return n


def _replica_list(replicas):
    if replicas is None:
        return None
    if isinstance(replicas, (int, np.integer)):
        if replicas < 1:
            raise ParameterError("need at least one replica")
        return list(range(int(replicas)))
    out = [int(r) for r in replicas]
    if not out:
        raise ParameterError("need at least one replica")
    return out


class _Recorder:
    def __init__(self, n_steps, stride, shape, with_v):
        if stride < 1:
            raise ParameterError("output stride must be >= 1")
        n_out = n_steps // stride + 1
        self.stride = stride
        self.times = np.empty(n_out)
        self.u = np.empty((n_out,) + shape)
        self.v = np.empty((n_out,) + shape) if with_v else None
        self.i = 0

    def record(self, step, t, u, v=None):
        if step % self.stride:
            return
        self.times[self.i] = t
        self.u[self.i] = u
        if self.v is not None:
            self.v[self.i] = v
        self.i += 1

    def finish(self):
        n = self.i
        return self.times[:n], self.u[:n], None if self.v is None else self.v[:n]


def _streams(seed, role, replicas, needed):
    if not needed:
        return None
    return derive_streams(seed, role, replicas if replicas is not None else [0])


def _normals(streams, n, width, single):
    if streams is None:
        return None
    block = draw_block(streams, n, width)
    return block[0] if single else block.swapaxes(0, 1)


class _BlowupTracker:
    def __init__(self, n_rep, single):
        self.single = single
        self.times = np.full(n_rep, np.nan)
        self.dead = None

    def check(self, bad, t, *fields):
        """Record newly bad rows and zero them in the given fields."""
        if bad is None or not np.any(bad):
            return
        if self.single:
            raise BlowUpError("trajectory left the admissible range", t=t)
        new = bad & ~np.isfinite(self.times)
        self.times[new] = t
        self.dead = ~np.isnan(self.times)
        for f in fields:
            f[bad] = 0.0

    def freeze(self, *fields):
        """Keep rows that already blew up at zero."""
        if self.dead is not None:
            for f in fields:
                f[self.dead] = 0.0

    def result(self):
        return None if self.single else self.times


def _range_mask(a):
    if np.abs(a).max() <= BLOWUP_THRESHOLD:
        return None
    return ~np.all(np.isfinite(a) & (np.abs(a) <= BLOWUP_THRESHOLD), axis=-1)


def select_fast_stepper(problem, dt, mode="auto", theta=THETA):
    if mode == "auto":
        mode = "exact" if problem.g.is_unit_linear_fast else "general"
    if mode == "exact":
        if not problem.g.is_unit_linear_fast:
            raise UnsupportedFormError(f"exact fast stepper needs g = u - v, got {problem.g.name!r}")
        return FastExactStepper(problem.grid, dt, problem.epsilon, problem.sigma2, problem.Q2)
    if mode == "general":
        return FastGeneralStepper(
            problem.grid, dt, problem.epsilon, problem.sigma2, problem.Q2, problem.g, theta
        )
    raise ParameterError(f"unknown fast stepper {mode!r}")


def integrate_slow_fast(
    p,
    T,
    dt,
    output_stride=1,
    seed=0,
    replicas=None,
    v0="given",
    fast_stepper="auto",
    theta=THETA,
):
    """Integrate the coupled system with Lie splitting (fast step, then slow).

    ``replicas=None`` runs a single path (replica index 0) and returns
    unbatched arrays; an int or a list of replica indices runs a lock-step
    ensemble.  ``v0="stationary"`` draws v(0) from the stationary law of
    the fast equation at u0 (first N values of each fast stream).
    """
    grid = p.grid
    N = grid.n_modes
    n_steps = _n_steps(T, dt)
    reps = _replica_list(replicas)
    single = reps is None
    n_rep = 1 if single else len(reps)
    shape = (N,) if single else (n_rep, N)

    fast = select_fast_stepper(p, dt, fast_stepper, theta)
    slow = SlowStepper(grid, dt, p.sigma1, p.Q1.sqrt_variances)
    slow_streams = _streams(seed, "slow-noise", reps, slow.noisy)
    fast_streams = _streams(seed, "fast-noise", reps, fast.noisy or v0 == "stationary")

    u = np.broadcast_to(p.u0, shape).copy()
    if v0 == "stationary":
        if not p.g.is_unit_linear_fast:
            raise UnsupportedFormError("stationary initialisation needs g = u - v")
        mean, std = _stationary_moments(p.u0, p.sigma2, p.Q2, grid)
        v = mean + std * _normals(fast_streams, 1, N, single)[0]
    elif v0 == "given":
        v = np.broadcast_to(p.v0, shape).copy()
    else:
        raise ParameterError(f"unknown v0 mode {v0!r}")

    rec = _Recorder(n_steps, output_stride, shape, with_v=True)
    blow = _BlowupTracker(n_rep, single)
    rec.record(0, 0.0, u, v)
    n_sub = fast.n_sub
    substepped = isinstance(fast, FastGeneralStepper)
    step = 0
    while step < n_steps:
        m = min(CHUNK, n_steps - step)
        xf = _normals(fast_streams if fast.noisy else None, m * n_sub, N, single)
        xs = _normals(slow_streams, m, N, single)
        for i in range(m):
            t = (step + 1) * dt
            xi_f = None
            if xf is not None:
                xi_f = xf[i * n_sub : (i + 1) * n_sub]
                if not single:
                    xi_f = xi_f.swapaxes(0, 1)
                if not substepped:
                    xi_f = xi_f[..., 0, :]
            try:
                v = fast(v, u, xi_f)
            except BlowUpError:
                raise BlowUpError("fast component blew up", t=t) from None
            drift, bad = drift_with_mask(p.f, u, v, grid)
            blow.check(bad, t, drift, u, v)
            u = slow(u, drift, None if xs is None else xs[i])
            blow.check(_range_mask(u), t, u, v)
            blow.freeze(u, v)
            step += 1
            rec.record(step, t, u, v)
    times, us, vs = rec.finish()
    return Trajectory(grid, times, us, vs, blow.result(), n_steps * n_sub, {"dt": dt, "epsilon": p.epsilon})


# --------------------------------------------------------------------------
# averaged and deviation models


@dataclass(frozen=True, eq=False)
class AveragedModel:
    """Averaged drift, its linearisation and the deviation noise factor.

    ``fbar`` maps coefficient arrays to coefficient arrays.  ``fbar_prime``
    maps physical samples of u (on the padded grid) to physical samples of
    the multiplier fbar'_u(u).  ``sqrtB`` is per-mode (diagonal) or a dense
    square-root factor.
    """

    grid: EigenGrid
    fbar: object
    fbar_prime: object
    sqrtB: np.ndarray
    sigma1: float
    Q1: CovarianceSpec
    provenance: str


def fbar_closed_fhn(u, grid):
    """u - u^3 + (I - d_xx)^{-1} u for the FitzHugh-Nagumo drift."""
    u = np.asarray(u, float)
    local = eval_drift(FHN_SLOW, u, np.zeros_like(u), grid)
    return local + apply_diagonal(u, grid, resolvent_power(1))


def sqrtB_closed_fhn(Q, grid, sigma2=3.0):
    """Per-mode factor sigma2 sqrt(q_k) / (1 + lambda_k) of the deviation noise."""
    return np.abs(sigma2) * np.sqrt(Q.mode_variances) / (1.0 + grid.eigenvalues)


def _fhn_prime(u_phys):
    return 1.0 - 3.0 * u_phys**2


def fhn_averaged_model(grid, Q2, sigma1=0.0, Q1=None, sigma2=3.0):
    Q1 = Q2 if Q1 is None else Q1
    return AveragedModel(
        grid=grid,
        fbar=lambda u: fbar_closed_fhn(u, grid),
        fbar_prime=_fhn_prime,
        sqrtB=sqrtB_closed_fhn(Q2, grid, sigma2),
        sigma1=float(sigma1),
        Q1=Q1,
        provenance="closed_form_fhn",
    )


def exact_averaged_model(p):
    """Model for a slow drift that does not depend on v (no averaging needed)."""
    if p.f.depends_on_y:
        raise UnsupportedFormError(f"drift {p.f.name!r} depends on the fast variable")
    grid = p.grid
    return AveragedModel(
        grid=grid,
        fbar=lambda u: eval_drift(p.f, u, np.zeros_like(np.asarray(u, float)), grid),
        fbar_prime=lambda up: p.f.d_dx(up, np.zeros_like(up)),
        sqrtB=np.zeros(grid.n_modes),
        sigma1=p.sigma1,
        Q1=p.Q1,
        provenance="exact",
    )


def integrate_averaged(m, u0, T, dt, output_stride=1, seed=0, replicas=None):
    """du = [A u + fbar(u)] dt + sigma1 dW1, sharing W1 with integrate_slow_fast."""
    grid = m.grid
    N = grid.n_modes
    n_steps = _n_steps(T, dt)
    reps = _replica_list(replicas)
    single = reps is None
    n_rep = 1 if single else len(reps)
    shape = (N,) if single else (n_rep, N)
    slow = SlowStepper(grid, dt, m.sigma1, m.Q1.sqrt_variances)
    streams = _streams(seed, "slow-noise", reps, slow.noisy)
    u = np.broadcast_to(np.asarray(u0, float), shape).copy()
    rec = _Recorder(n_steps, output_stride, shape, with_v=False)
    blow = _BlowupTracker(n_rep, single)
    rec.record(0, 0.0, u)
    step = 0
    while step < n_steps:
        k = min(CHUNK, n_steps - step)
        xs = _normals(streams, k, N, single)
        for i in range(k):
            t = (step + 1) * dt
            with np.errstate(over="ignore", invalid="ignore"):
                drift = m.fbar(u)
            blow.check(_range_mask(drift), t, drift, u)
            u = slow(u, drift, None if xs is None else xs[i])
            blow.check(_range_mask(u), t, u)
            blow.freeze(u)
            step += 1
            rec.record(step, t, u)
    times, us, _ = rec.finish()
    return Trajectory(grid, times, us, None, blow.result(), n_steps, {"dt": dt})


def _u_at(u_path, n_steps, dt, grid):
    """Callable step index -> padded physical samples of u."""
    if isinstance(u_path, Trajectory):
        times = u_path.times
        if times[0] > 1e-12 or times[-1] < n_steps * dt - 1e-9:
            raise ParameterError("u path does not cover [0, T]")
        coeffs = u_path.u
        if coeffs.ndim != 2:
            raise ParameterError("u path must be a single-replica trajectory")

        def at(step):
            t = step * dt
            j = min(np.searchsorted(times, t, side="right") - 1, len(times) - 2)
            j = max(j, 0)
            w = (t - times[j]) / (times[j + 1] - times[j]) if len(times) > 1 else 0.0
            c = (1 - w) * coeffs[j] + w * coeffs[min(j + 1, len(times) - 1)]
            return padded_values(c, grid)

        return at, False
    c = np.asarray(u_path, float)
    if c.shape != (grid.n_modes,):
        raise ParameterError("constant u must be a single coefficient vector")
    up = padded_values(c, grid)
    return (lambda step: up), True


def integrate_deviation(m, u_path, T, dt, output_stride=1, seed=0, replicas=None):
    """dz = [A z + fbar'_u(u(t)) z] dt + sqrt(B) dW_bar,  z(0) = 0."""
    grid = m.grid
    N = grid.n_modes
    n_steps = _n_steps(T, dt)
    reps = _replica_list(replicas)
    single = reps is None
    n_rep = 1 if single else len(reps)
    shape = (N,) if single else (n_rep, N)
    stepper = SlowStepper(grid, dt, 1.0, m.sqrtB)
    streams = _streams(seed, "deviation-noise", reps, stepper.noisy)
    u_at, constant = _u_at(u_path, n_steps, dt, grid)
    mult = m.fbar_prime(u_at(0))
    z = np.zeros(shape)
    rec = _Recorder(n_steps, output_stride, shape, with_v=False)
    blow = _BlowupTracker(n_rep, single)
    rec.record(0, 0.0, z)
    step = 0
    while step < n_steps:
        k = min(CHUNK, n_steps - step)
        xs = _normals(streams, k, N, single)
        for i in range(k):
            if not constant:
                mult = m.fbar_prime(u_at(step))
            drift = pointwise_product(mult, z, grid)
            z = stepper(z, drift, None if xs is None else xs[i])
            step += 1
            blow.check(_range_mask(z), step * dt, z)
            blow.freeze(z)
            rec.record(step, step * dt, z)
    times, zs, _ = rec.finish()
    return Trajectory(grid, times, zs, None, blow.result(), n_steps, {"dt": dt})


def empirical_deviation(traj_eps, traj_avg, epsilon):
    """(u^eps - u) / sqrt(eps) on a common time grid."""
    if len(traj_eps.times) != len(traj_avg.times) or not np.allclose(
        traj_eps.times, traj_avg.times, rtol=0, atol=1e-12
    ):
        raise ParameterError("trajectories are recorded on different time grids")
    if not epsilon > 0:
        raise ParameterError("epsilon must be positive")
    ua = traj_avg.u
    if ua.ndim < traj_eps.u.ndim:
        ua = ua[:, None, :]
    z = (traj_eps.u - ua) / math.sqrt(epsilon)
    return Trajectory(traj_eps.grid, traj_eps.times.copy(), z, None, traj_eps.blowup_times, traj_eps.steps)


def lyapunov_variance(sqrtB_k, decay_rate):
    """Stationary variance of dz = -rate z dt + s dW, i.e. s^2 / (2 rate)."""
    if not decay_rate > 0:
        raise ParameterError("decay rate must be positive for a stationary variance")
    return sqrtB_k**2 / (2.0 * decay_rate)


# --------------------------------------------------------------------------
# ergodic estimators


@dataclass(frozen=True)
class FbarEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n_samples: int


def _unit_scale_stepper(g, grid, dt, sigma2, Q2):
    if g.is_unit_linear_fast:
        return FastExactStepper(grid, dt, 1.0, sigma2, Q2)
    return FastGeneralStepper(grid, dt, 1.0, sigma2, Q2, g)


def _fast_samples(g, u, sigma2, Q2, grid, dt, t_burn, n_samples, streams):
    """Fast trajectories at unit time scale with u frozen.

    Returns v at every step after burn-in, shape (n_samples, R, N).
    Starts from the stationary law when it is known in closed form.
    """
    R = len(streams)
    N = grid.n_modes
    stepper = _unit_scale_stepper(g, grid, dt, sigma2, Q2)
    u = np.broadcast_to(np.asarray(u, float), (R, N))
    if g.is_unit_linear_fast:
        mean, std = _stationary_moments(u[0], sigma2, Q2, grid)
        v = mean + std * draw_block(streams, 1, N)[:, 0]
    else:
        v = np.zeros((R, N))
    n_burn = int(round(t_burn / dt))
    n_sub = stepper.n_sub
    substepped = isinstance(stepper, FastGeneralStepper)
    out = np.empty((n_samples, R, N))
    total = n_burn + n_samples
    step = 0
    while step < total:
        k = min(CHUNK, total - step)
        xi = draw_block(streams, k * n_sub, N)
        for i in range(k):
            x = xi[:, i * n_sub : (i + 1) * n_sub]
            v = stepper(v, u, x if substepped else x[:, 0])
            if step >= n_burn:
                out[step - n_burn] = v
            step += 1
    return out


def estimate_fbar(f, g, u, sigma2, Q2, grid, t_burn, t_avg, dt, seed=0, replica=0, n_batches=16):
    """Time average of f(u, v(tau)) along one fast path at unit time scale."""
    if not t_avg > 0 or not dt > 0:
        raise ParameterError("t_avg and dt must be positive")
    n = int(round(t_avg / dt))
    n -= n % n_batches
    if n < n_batches:
        raise ParameterError("t_avg too short for the requested batch count")
    streams = derive_streams(seed, "estimator-noise", [replica])
    v = _fast_samples(g, u, sigma2, Q2, grid, dt, t_burn, n, streams)[:, 0]
    u = np.asarray(u, float)
    vals = np.empty_like(v)
    for s in range(0, n, CHUNK):
        vals[s : s + CHUNK] = eval_drift(f, np.broadcast_to(u, v[s : s + CHUNK].shape), v[s : s + CHUNK], grid)
    batches = vals.reshape(n_batches, n // n_batches, -1).mean(axis=1)
    mean = vals.mean(axis=0)
    stderr = batches.std(axis=0, ddof=1) / math.sqrt(n_batches)
    return FbarEstimate(mean, stderr, n)


@dataclass(frozen=True)
class BEstimate:
    matrix: np.ndarray
    stderr: np.ndarray
    factor: np.ndarray
    lags_used: int
    converged: bool
    warning: str = ""


def _psd_factor(B):
    w, V = np.linalg.eigh(0.5 * (B + B.T))
    return (V * np.sqrt(np.clip(w, 0, None))) @ V.T


def estimate_B(
    f,
    g,
    u,
    sigma2,
    Q2,
    grid,
    dt,
    t_burn,
    lag_max,
    replicas,
    t_sample,
    seed=0,
    n_batches=16,
    floor=1e-3,
):
    """Correlation-integral estimate of the deviation covariance B(u).

    ``lag_max`` is a number of lags of size ``dt``; ``t_sample`` is the
    stationary path length per replica.  Entries of modes whose correlation
    time is not resolved by ``dt`` are biased upwards; for g = u - v this is
    flagged in ``warning`` when (1 + lambda_k) dt > 0.5.
    """
    if lag_max < 1:
        raise ParameterError("lag_max must be positive")
    R = int(replicas)
    if R < n_batches:
        n_batches = R
    n = int(round(t_sample / dt))
    if n <= lag_max:
        raise ParameterError("t_sample must exceed lag_max * dt")
    N = grid.n_modes
    streams = derive_streams(seed, "estimator-noise", range(R))
    v = _fast_samples(g, u, sigma2, Q2, grid, dt, t_burn, n, streams)
    u = np.asarray(u, float)
    F = np.empty_like(v)
    for s in range(0, n, CHUNK):
        blk = v[s : s + CHUNK]
        F[s : s + CHUNK] = eval_drift(f, np.broadcast_to(u, blk.shape), blk, grid)
    F -= F.mean(axis=(0, 1))
    X = F.transpose(1, 0, 2)  # (R, n, N)
    nfft = 1 << int(math.ceil(math.log2(n + lag_max + 1)))
    norm = (n - np.arange(lag_max + 1)).astype(float)
    cov_batches = []
    for idx in np.array_split(np.arange(R), n_batches):
        Fx = np.fft.rfft(X[idx], nfft, axis=1)
        S = np.einsum("rfi,rfj->fij", Fx, Fx.conj())
        c = np.fft.irfft(S, nfft, axis=0)[: lag_max + 1]
        cov_batches.append(c / (norm[:, None, None] * len(idx)))
    sizes = np.array([len(i) for i in np.array_split(np.arange(R), n_batches)], float)
    C = np.tensordot(sizes / sizes.sum(), np.array(cov_batches), axes=1)
    trace = np.trace(C, axis1=1, axis2=2)
    below = np.nonzero(trace < floor * trace[0])[0] if trace[0] > 0 else np.array([0])
    converged = below.size > 0
    cut = int(below[0]) if converged else lag_max
    w = np.ones(cut + 1)
    w[0] = w[-1] = 0.5
    if cut == 0:
        w[:] = 0.5

    def integrate(c):
        b = 2.0 * dt * np.tensordot(w, c[: cut + 1], axes=1)
        return 0.5 * (b + b.T)

    Bm = integrate(C)
    per_batch = np.array([integrate(c) for c in cov_batches])
    se = per_batch.std(axis=0, ddof=1) / math.sqrt(len(per_batch)) if len(per_batch) > 1 else np.full((N, N), np.nan)
    notes = []
    if not converged:
        notes.append(f"autocorrelation did not fall below {floor:g} within {lag_max} lags")
    if g.is_unit_linear_fast:
        coarse = np.nonzero((1.0 + grid.eigenvalues) * dt > 0.5)[0]
        if coarse.size:
            notes.append(f"modes >= {coarse[0] + 1} are under-resolved by dt={dt:g}")
    warning = "; ".join(notes)
    return BEstimate(Bm, se, _psd_factor(Bm), cut, converged, warning)
