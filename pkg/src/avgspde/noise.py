"""Diagonal Q-Wiener noise and reproducible random streams.

Streams are counter based: the value at position ``n`` of the stream
``(base_seed, role, replica)`` is fixed by those three labels alone, so
replicas may be simulated in any order, in any batch size, or on any
worker and still see identical noise.  Values are produced in blocks of
``BLOCK`` standard normals; block ``b`` comes from a PCG64 generator keyed
by ``SeedSequence(base_seed, spawn_key=(role, replica, b))``.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

__all__ = [
    "ROLES",
    "CovarianceSpec",
    "TraceReport",
    "NoiseStream",
    "make_covariance",
    "trace_report",
    "derive_stream",
    "derive_streams",
    "sample_increment",
    "draw_block",
]

ROLES = ("slow-noise", "fast-noise", "deviation-noise", "estimator-noise")
BLOCK = 8192
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True, eq=False)
class CovarianceSpec:
    kind: str
    power: float
    mode_variances: np.ndarray

    @property
    def sqrt_variances(self):
        return np.sqrt(self.mode_variances)

    def describe(self):
        if self.kind == "resolvent_power":
            return f"resolvent_power(p={self.power:g})"
        return self.kind


def make_covariance(kind, grid, p=1.0, variances=None):
    """Covariance diagonal in the eigenbasis.

    kind is ``"resolvent_power"`` (q_k = (1 + lambda_k)^-p), ``"cylindrical"``
    (q_k = 1) or ``"custom"`` (explicit nonnegative ``variances``).
    """
    if kind == "resolvent_power":
        p = float(p)
        if not p >= 0:
            raise ParameterError(f"resolvent power must be >= 0, got {p}")
        q = (1.0 + grid.eigenvalues) ** (-p)
    elif kind == "cylindrical":
        p = 0.0
        q = np.ones(grid.n_modes)
    elif kind == "custom":
        if variances is None:
            raise ParameterError("custom covariance needs explicit mode variances")
        q = np.asarray(variances, dtype=float)
        if q.shape != (grid.n_modes,):
            raise ParameterError(f"expected {grid.n_modes} mode variances, got {q.shape}")
        if np.any(q < 0) or not np.all(np.isfinite(q)):
            raise ParameterError("mode variances must be finite and nonnegative")
        p = float("nan")
    else:
        raise ParameterError(f"unknown covariance kind {kind!r}")
    q = np.array(q, dtype=float)
    q.setflags(write=False)
    return CovarianceSpec(kind=kind, power=p, mode_variances=q)


@dataclass(frozen=True)
class TraceReport:
    trace_q: float
    trace_sqrtA_q: float
    tail_exponent: float
    h4_ok: bool


def trace_report(cov, grid):
    """Partial traces tr Q and tr A^{1/2} Q plus a divergence diagnostic.

    The represented modes only give partial sums, so convergence of the full
    series is judged from the log-log slope of sqrt(lambda_k) q_k over the
    last quarter of the modes; a slope >= -1 means the series diverges.
    """
    q = cov.mode_variances
    terms = np.sqrt(grid.eigenvalues) * q
    n_tail = max(2, grid.n_modes // 4)
    tail_exponent = float("nan")
    if grid.n_modes >= 2 and np.all(terms[-n_tail:] > 0):
        k = np.arange(grid.n_modes - n_tail + 1, grid.n_modes + 1)
        tail_exponent = float(np.polyfit(np.log(k), np.log(terms[-n_tail:]), 1)[0])
    elif grid.n_modes >= 2 and np.all(terms[-n_tail:] == 0):
        tail_exponent = -math.inf
    return TraceReport(
        trace_q=float(np.sum(q)),
        trace_sqrtA_q=float(np.sum(terms)),
        tail_exponent=tail_exponent,
        h4_ok=bool(tail_exponent < -1.0),
    )


def _role_index(role):
    try:
        return ROLES.index(role)
    except ValueError:
        raise ParameterError(f"unknown stream role {role!r}; expected one of {ROLES}") from None


class NoiseStream:
    """Sequential standard normals for one (base_seed, role, replica)."""

    def __init__(self, base_seed, role, replica, counter=0):
        if int(replica) < 0:
            raise ParameterError(f"replica index must be nonnegative, got {replica}")
        self.base_seed = int(base_seed) & _MASK64
        self.role = role
        self.replica = int(replica)
        self._role_index = _role_index(role)
        self._block_index = -1
        self._block = None
        self.counter = 0
        self.seek(counter)

    def __repr__(self):
        return (
            f"NoiseStream(base_seed={self.base_seed}, role={self.role!r}, "
            f"replica={self.replica}, counter={self.counter})"
        )

    def _load(self, b):
        if b != self._block_index:
            ss = np.random.SeedSequence(
                self.base_seed, spawn_key=(self._role_index, self.replica, b)
            )
            self._block = np.random.Generator(np.random.PCG64(ss)).standard_normal(BLOCK)
            self._block_index = b
        return self._block

    def seek(self, counter):
        """Position the stream so the next value drawn is number ``counter``."""
        if int(counter) < 0:
            raise ParameterError("stream counter must be nonnegative")
        self.counter = int(counter)

    def normals(self, n):
        """Next ``n`` standard normals; advances the counter by ``n``."""
        out = np.empty(n)
        filled = 0
        while filled < n:
            b, off = divmod(self.counter, BLOCK)
            take = min(n - filled, BLOCK - off)
            out[filled : filled + take] = self._load(b)[off : off + take]
            filled += take
            self.counter += take
        return out


def derive_stream(base_seed, role, replica):
    return NoiseStream(base_seed, role, replica)


def derive_streams(base_seed, role, replicas):
    return [NoiseStream(base_seed, role, r) for r in replicas]


def draw_block(streams, n_steps, width):
    """Standard normals of shape (len(streams), n_steps, width).

    Each stream contributes ``n_steps * width`` consecutive values, so the
    result does not depend on how a run is chunked into blocks.
    """
    out = np.empty((len(streams), n_steps, width))
    for i, s in enumerate(streams):
        out[i] = s.normals(n_steps * width).reshape(n_steps, width)
    return out


def sample_increment(cov, variance_scale, stream):
    """Gaussian field with mode k distributed N(0, variance_scale * q_k)."""
    variance_scale = float(variance_scale)
    if variance_scale < 0:
        raise ParameterError("variance scale must be nonnegative")
    z = stream.normals(len(cov.mode_variances))
    return np.sqrt(variance_scale * cov.mode_variances) * z
