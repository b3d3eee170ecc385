"""Dirichlet sine eigenbasis on (-L, L) and diagonal functional calculus.

Fields are stored as coefficient arrays whose trailing axis indexes the
modes k = 1..N; leading axes (replicas, time) broadcast through every
routine here.  Basis functions are L2-normalised,

    phi_k(x) = sqrt(1/L) * sin(k pi (x + L) / (2L)),

and the N interior nodes x_j = -L + j h, h = 2L/(N+1), make the discrete
sine transform exactly orthonormal, so the node <-> coefficient maps are
exact inverses of each other.
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ParameterError

__all__ = [
    "EigenGrid",
    "build_grid",
    "padded_grid",
    "to_physical",
    "from_physical",
    "evaluate",
    "resolvent_power",
    "semigroup",
    "apply_diagonal",
    "sobolev_norm",
    "unit_mode",
]


def _frozen(a):
    a = np.ascontiguousarray(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class EigenGrid:
    """Eigenvalues, collocation nodes and basis table of A = d^2/dx^2."""

    half_length: float
    n_modes: int
    eigenvalues: np.ndarray = field(repr=False)
    nodes: np.ndarray = field(repr=False)
    spacing: float = field(repr=False)
    # basis_table[j, k] = phi_{k+1}(x_j)
    basis_table: np.ndarray = field(repr=False)

    @property
    def lambda1(self):
        return float(self.eigenvalues[0])

    @property
    def key(self):
        return (self.half_length, self.n_modes)

    def __eq__(self, other):
        return isinstance(other, EigenGrid) and self.key == other.key

    def __hash__(self):
        return hash(self.key)


@lru_cache(maxsize=64)
def _cached_grid(L, N):
    k = np.arange(1, N + 1)
    j = np.arange(1, N + 1)
    h = 2.0 * L / (N + 1)
    eigenvalues = (k * np.pi / (2.0 * L)) ** 2
    nodes = -L + j * h
    # sin(k pi (x_j + L)/(2L)) = sin(k j pi/(N+1)) evaluated on integers
    basis = np.sqrt(1.0 / L) * np.sin(np.outer(j, k) * np.pi / (N + 1))
    return EigenGrid(
        half_length=L,
        n_modes=N,
        eigenvalues=_frozen(eigenvalues),
        nodes=_frozen(nodes),
        spacing=h,
        basis_table=_frozen(basis),
    )


def build_grid(L, N):
    """Return the N-mode Dirichlet eigenbasis on (-L, L)."""
    try:
        L = float(L)
    except (TypeError, ValueError):
        raise ParameterError(f"half-length must be a real number, got {L!r}") from None
    if not np.isfinite(L) or L <= 0:
        raise ParameterError(f"half-length L must be positive, got {L}")
    if isinstance(N, bool) or int(N) != N or N < 1:
        raise ParameterError(f"number of modes N must be a positive integer, got {N}")
    return _cached_grid(L, int(N))


def padded_grid(grid):
    """Grid with 2N+1 modes on the same interval, used for dealiasing."""
    return _cached_grid(grid.half_length, 2 * grid.n_modes + 1)


def _check_length(a, grid, what):
    a = np.asarray(a, dtype=float)
    if a.shape[-1:] != (grid.n_modes,):
        raise ParameterError(
            f"{what} has trailing length {a.shape[-1] if a.ndim else 0}, "
            f"expected {grid.n_modes}"
        )
    return a


def to_physical(coefficients, grid):
    """Node values sum_k c_k phi_k(x_j)."""
    c = _check_length(coefficients, grid, "coefficient array")
    return c @ grid.basis_table.T


def from_physical(values, grid):
    """Coefficients c_k = h sum_j values_j phi_k(x_j); exact inverse of to_physical."""
    v = _check_length(values, grid, "node-value array")
    return grid.spacing * (v @ grid.basis_table)


def evaluate(coefficients, grid, x):
    """Evaluate the expansion at arbitrary points x (scalar or 1-D array)."""
    c = _check_length(coefficients, grid, "coefficient array")
    L = grid.half_length
    k = np.arange(1, grid.n_modes + 1)
    x = np.asarray(x, dtype=float)
    phi = np.sqrt(1.0 / L) * np.sin(np.multiply.outer(x + L, k) * np.pi / (2 * L))
    return c @ phi.T if x.ndim else c @ phi


def unit_mode(grid, k, amplitude=1.0):
    """Coefficient vector of amplitude * phi_k."""
    if not 1 <= k <= grid.n_modes:
        raise ParameterError(f"mode {k} outside 1..{grid.n_modes}")
    c = np.zeros(grid.n_modes)
    c[k - 1] = amplitude
    return c


def resolvent_power(p):
    """Multiplier rule (1 + lambda_k)^(-p), i.e. (I - A)^(-p)."""
    p = float(p)

    def rule(lam):
        return (1.0 + lam) ** (-p)

    rule.__name__ = f"resolvent_power({p:g})"
    return rule


def semigroup(t):
    """Multiplier rule exp(-lambda_k t), i.e. e^{At}."""
    t = float(t)
    if t < 0:
        raise ParameterError(f"semigroup time must be nonnegative, got {t}")

    def rule(lam):
        return np.exp(-lam * t)

    rule.__name__ = f"semigroup({t:g})"
    return rule


def apply_diagonal(coefficients, grid, multiplier):
    """Scale each mode by a rule evaluated at lambda_k, or by an explicit list."""
    c = _check_length(coefficients, grid, "coefficient array")
    if callable(multiplier):
        factors = np.asarray(multiplier(grid.eigenvalues), dtype=float)
    else:
        factors = np.asarray(multiplier, dtype=float)
        if factors.shape != (grid.n_modes,):
            raise ParameterError(
                f"multiplier list has shape {factors.shape}, expected ({grid.n_modes},)"
            )
    return c * factors


def sobolev_norm(coefficients, grid, alpha=0.0):
    """|A^{alpha/2} u| = (sum_k lambda_k^alpha c_k^2)^(1/2), over the last axis."""
    c = _check_length(coefficients, grid, "coefficient array")
    w = grid.eigenvalues ** float(alpha)
    return np.sqrt(np.sum(w * c * c, axis=-1))
