"""Reaction terms, slow-fast problem definitions and the hypothesis audit."""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import BlowUpError, ParameterError
from .noise import CovarianceSpec, make_covariance, trace_report
from .spectral import EigenGrid, build_grid, padded_grid, unit_mode

__all__ = [
    "BLOWUP_THRESHOLD",
    "DriftSpec",
    "polynomial_drift",
    "FHN_SLOW",
    "FHN_FAST",
    "HypothesisConstants",
    "SlowFastProblem",
    "fhn_problem",
    "eval_drift",
    "pointwise_product",
    "AuditEntry",
    "AuditReport",
    "hypothesis_audit",
]

BLOWUP_THRESHOLD = 1e6


@dataclass(frozen=True, eq=False)
class DriftSpec:
    """Pointwise reaction term f(x, y) with its x-derivative.

    ``coefficients`` maps exponent pairs (i, j) to c in sum c x^i y^j when
    the drift is polynomial; it is None for drifts given as plain callables.
    """

    name: str
    func: object
    d_dx: object
    coefficients: dict = field(default=None, repr=False)

    def __call__(self, x, y):
        return self.func(x, y)

    @property
    def depends_on_y(self):
        if self.coefficients is None:
            return True
        return any(j != 0 and c != 0 for (_, j), c in self.coefficients.items())

    @property
    def is_unit_linear_fast(self):
        """True for g(x, y) = x - y, the form the exact OU stepper handles."""
        if self.coefficients is None:
            return False
        nonzero = {k: c for k, c in self.coefficients.items() if c != 0}
        return nonzero == {(1, 0): 1.0, (0, 1): -1.0}


def _poly_eval(table):
    terms = sorted(table.items())

    def f(x, y):
        out = np.zeros(np.broadcast(x, y).shape)
        for (i, j), c in terms:
            out = out + c * x**i * y**j
        return out

    return f


def polynomial_drift(name, table):
    """Drift sum c x^i y^j from a table {(i, j): c}."""
    table = {(int(i), int(j)): float(c) for (i, j), c in dict(table).items()}
    if any(i < 0 or j < 0 for i, j in table):
        raise ParameterError("polynomial exponents must be nonnegative")
    deriv = {(i - 1, j): c * i for (i, j), c in table.items() if i > 0}
    return DriftSpec(name, _poly_eval(table), _poly_eval(deriv), table)


def _fhn_slow(x, y):
    return x - x * x * x + y


def _fhn_slow_dx(x, y):
    return 1.0 - 3.0 * x**2 + 0.0 * y


FHN_SLOW = DriftSpec(
    "fhn_slow", _fhn_slow, _fhn_slow_dx, {(1, 0): 1.0, (3, 0): -1.0, (0, 1): 1.0}
)
FHN_FAST = polynomial_drift("fhn_fast", {(1, 0): 1.0, (0, 1): -1.0})


@dataclass(frozen=True)
class HypothesisConstants:
    """Declared constants of the standing hypotheses.

    ``c`` may be left as None, in which case the audit reports the smallest
    value that makes the lattice spot-checks hold.
    """

    C_f: float = 1.0
    C_g: float = 1.0
    a: float = 1.0
    b: float = 1.0
    c: float = None
    d: float = 1.0
    e: float = 1.0

    def __post_init__(self):
        for name in ("C_f", "C_g", "a", "b", "c", "d", "e"):
            val = getattr(self, name)
            if val is not None and not val >= 0:
                raise ParameterError(f"hypothesis constant {name} must be nonnegative")


@dataclass(frozen=True, eq=False)
class SlowFastProblem:
    grid: EigenGrid
    f: DriftSpec
    g: DriftSpec
    sigma1: float
    sigma2: float
    epsilon: float
    Q1: CovarianceSpec
    Q2: CovarianceSpec
    u0: np.ndarray
    v0: np.ndarray
    constants: HypothesisConstants = HypothesisConstants()

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ParameterError(f"epsilon must be positive, got {self.epsilon}")
        if self.sigma2 == 0:
            raise ParameterError("sigma2 must be nonzero")
        n = self.grid.n_modes
        for name in ("u0", "v0"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (n,):
                raise ParameterError(f"{name} must have {n} coefficients, got shape {a.shape}")
            if not np.all(np.isfinite(a)):
                raise ParameterError(f"{name} has non-finite coefficients")
            object.__setattr__(self, name, a)
        for name in ("Q1", "Q2"):
            if len(getattr(self, name).mode_variances) != n:
                raise ParameterError(f"{name} does not match the grid size")

    def with_(self, **changes):
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw.update(changes)
        return SlowFastProblem(**kw)


def fhn_problem(
    L=1.0,
    N=16,
    epsilon=0.1,
    sigma1=0.0,
    sigma2=3.0,
    q1=("resolvent_power", 1.0),
    q2=("resolvent_power", 1.0),
    u0_amplitude=0.0,
    v0=None,
):
    """Stochastic FitzHugh-Nagumo system f = u - u^3 + v, g = u - v."""
    grid = build_grid(L, N)
    u0 = unit_mode(grid, 1, u0_amplitude)
    v0 = np.zeros(N) if v0 is None else np.asarray(v0, dtype=float)
    return SlowFastProblem(
        grid=grid,
        f=FHN_SLOW,
        g=FHN_FAST,
        sigma1=float(sigma1),
        sigma2=float(sigma2),
        epsilon=float(epsilon),
        Q1=make_covariance(q1[0], grid, q1[1]),
        Q2=make_covariance(q2[0], grid, q2[1]),
        u0=u0,
        v0=v0,
    )


@lru_cache(maxsize=64)
def _pad_operators(key):
    L, N = key
    pg = padded_grid(build_grid(L, N))
    synth = np.ascontiguousarray(pg.basis_table[:, :N].T)  # (N, N')
    analysis = np.ascontiguousarray(pg.spacing * pg.basis_table[:, :N])  # (N', N)
    return synth, analysis


def padded_values(c, grid):
    """Node values of ``c`` on the 2N+1-point padded grid."""
    synth, _ = _pad_operators(grid.key)
    return np.asarray(c, dtype=float) @ synth


def project_padded(values, grid):
    """Project padded-grid node values onto the N retained modes."""
    _, analysis = _pad_operators(grid.key)
    return values @ analysis


def _bad_rows(*arrays):
    """Boolean row mask of out-of-range rows, or None when every row is fine."""
    if all(np.abs(a).max() <= BLOWUP_THRESHOLD for a in arrays):
        return None
    bad = None
    for a in arrays:
        rows = ~np.all(np.isfinite(a) & (np.abs(a) <= BLOWUP_THRESHOLD), axis=-1)
        bad = rows if bad is None else bad | rows
    return bad


def drift_with_mask(d, u, v, grid):
    """Pseudospectral drift plus a mask of rows that blew up (None if none did).

    Bad rows are returned as zeros so callers can keep integrating the rest
    of an ensemble.
    """
    up = padded_values(u, grid)
    vp = padded_values(v, grid)
    with np.errstate(over="ignore", invalid="ignore"):
        fp = d.func(up, vp)
    bad = _bad_rows(up, vp, fp)
    if bad is not None:
        fp = np.where(bad[..., None], 0.0, fp)
    return project_padded(fp, grid), bad


def eval_drift(d, u, v, grid):
    """Coefficients of d(u, v) via padded (2N+1) collocation and projection."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape[-1] != grid.n_modes or v.shape[-1] != grid.n_modes:
        raise ParameterError("fields do not match the grid size")
    out, bad = drift_with_mask(d, u, v, grid)
    if bad is not None and np.any(bad):
        raise BlowUpError(f"drift {d.name!r} produced values beyond {BLOWUP_THRESHOLD:g}")
    return out


def pointwise_product(multiplier_values, z, grid):
    """Project (multiplier * z) where the multiplier is given on the padded grid."""
    return project_padded(multiplier_values * padded_values(z, grid), grid)


@dataclass(frozen=True)
class AuditEntry:
    hypothesis: str
    status: str
    detail: str


@dataclass(frozen=True)
class AuditReport:
    entries: tuple
    fitted: dict

    @property
    def warnings(self):
        return [f"{e.hypothesis}: {e.detail}" for e in self.entries if e.status == "warn"]

    @property
    def ok(self):
        return not self.warnings


def _lattice(n=101, extent=3.0):
    s = np.linspace(-extent, extent, n)
    return np.meshgrid(s, s, indexing="ij")


def _required_c(lhs, rhs_without_c):
    return float(max(0.0, np.max(lhs - rhs_without_c)))


def hypothesis_audit(p):
    """Spot-check H1-H4 with the declared constants.  Never raises."""
    k = p.constants
    x, y = _lattice()
    entries = []
    fitted = {}

    f = p.f(x, y)
    fx = p.f.d_dx(x, y)
    h = 1e-6
    fy = (p.f(x, y + h) - p.f(x, y - h)) / (2 * h)
    needed = [
        _required_c(f**2, k.a * x**6 + k.b * y**2),
        _required_c(f * x, -k.a * x**2 - k.b * x * y),
    ]
    # one-sided monotonicity: (f(x1,y)-f(x2,y))(x1-x2) <= a (x1-x2)^2 + c
    s = x[:, 0]
    for j in range(0, s.size, 10):
        fv = p.f(s, np.full_like(s, s[j]))
        dx = s[:, None] - s[None, :]
        needed.append(_required_c((fv[:, None] - fv[None, :]) * dx, k.a * dx**2))
    c_needed = max(needed)
    fitted["c_required"] = c_needed
    problems = []
    if np.max(fx) > k.C_f + 1e-9:
        problems.append(f"f'_x reaches {np.max(fx):.4g} > C_f={k.C_f:g}")
    if np.max(np.abs(fy)) > k.C_f + 1e-6:
        problems.append(f"|f'_y| reaches {np.max(np.abs(fy)):.4g} > C_f={k.C_f:g}")
    if k.c is None:
        c_note = f"c not declared; lattice requires c >= {c_needed:.6g}"
    elif k.c < c_needed:
        problems.append(f"declared c={k.c:g} below lattice requirement {c_needed:.6g}")
        c_note = ""
    else:
        c_note = f"c={k.c:g} covers lattice requirement {c_needed:.6g}"
    detail = "; ".join(problems + ([c_note] if c_note else [])) or "lattice spot-check holds"
    entries.append(AuditEntry("H1", "warn" if problems else "pass", detail))

    g = p.g(x, y)
    gx = (p.g(x + h, y) - p.g(x - h, y)) / (2 * h)
    gy = (p.g(x, y + h) - p.g(x, y - h)) / (2 * h)
    lip = float(max(np.max(np.abs(gx)), np.max(np.abs(gy))))
    fitted["g_lipschitz"] = lip
    problems = []
    if lip > k.C_g + 1e-6:
        problems.append(f"g partial derivatives reach {lip:.4g} > C_g={k.C_g:g}")
    excess = float(np.max(g * y - (-k.d * y**2 + k.e * x * y)))
    if excess > 1e-9:
        problems.append(f"g(x,y)y <= -d y^2 + e x y violated by {excess:.4g}")
    entries.append(
        AuditEntry("H2", "warn" if problems else "pass", "; ".join(problems) or "lattice spot-check holds")
    )

    lam1 = p.grid.lambda1
    problems = []
    if not k.C_g < lam1:
        problems.append(f"C_g={k.C_g:g} is not below lambda_1={lam1:.6g}")
    if not k.b >= k.e:
        problems.append(f"b={k.b:g} < e={k.e:g}")
    entries.append(
        AuditEntry(
            "H3",
            "warn" if problems else "pass",
            "; ".join(problems) or f"C_g={k.C_g:g} < lambda_1={lam1:.6g} and b >= e",
        )
    )

    problems = []
    notes = []
    for name, cov in (("Q1", p.Q1), ("Q2", p.Q2)):
        tr = trace_report(cov, p.grid)
        fitted[f"{name}_tail_exponent"] = tr.tail_exponent
        if tr.h4_ok:
            notes.append(f"{name}={cov.describe()} tr[A^1/2 Q] partial sum {tr.trace_sqrtA_q:.6g}")
        else:
            problems.append(
                f"{name}={cov.describe()} tr[A^1/2 Q] diverges "
                f"(tail exponent {tr.tail_exponent:.3g} >= -1)"
            )
    entries.append(AuditEntry("H4", "warn" if problems else "pass", "; ".join(problems or notes)))
    return AuditReport(tuple(entries), fitted)
