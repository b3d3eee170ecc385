"""Flat ``key=value`` experiment configuration.

A config file holds one ``key=value`` pair per line; ``#`` starts a comment.
Lists are comma separated (``epsilons=0.4,0.2,0.1``) and ranges may be
written ``start:step:stop`` (inclusive).  Resolution order is: global
defaults, then the subcommand's defaults, then the file, then flags.
A run manifest (JSON) is also accepted wherever a config path is.
"""

import hashlib
import json
import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ParameterError

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "DEFAULTS",
    "SUBCOMMAND_DEFAULTS",
    "parse_config",
    "parse_text",
    "format_value",
]


class ConfigError(ParameterError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.line = line


def _pos(x):
    return x > 0


def _nonneg(x):
    return x >= 0


def _any(x):
    return True


# key -> (type, default, validator, description)
_SCHEMA = {
    "L": (float, 1.0, _pos, "half-length of the domain (-L, L)"),
    "N": (int, 16, _pos, "number of retained eigenmodes"),
    "epsilon": (float, 0.1, _pos, "time-scale separation"),
    "epsilons": ("floats", (0.4, 0.2, 0.1, 0.05, 0.025), _pos, "epsilon grid for studies"),
    "L_grid": ("floats", None, _pos, "half-length grid for the bifurcation sweep"),
    "sigma1": (float, 0.0, _any, "slow noise amplitude"),
    "sigma2": (float, 3.0, lambda x: x != 0, "fast noise amplitude (nonzero)"),
    "q1_kind": ("kind", "resolvent_power", _any, "slow noise covariance kind"),
    "q1_power": (float, 1.0, _nonneg, "p in Q1 = (I - A)^-p"),
    "q2_kind": ("kind", "resolvent_power", _any, "fast noise covariance kind"),
    "q2_power": (float, 1.0, _nonneg, "p in Q2 = (I - A)^-p"),
    "T": (float, 6.0, _pos, "final time"),
    "dt": (float, 1e-3, _pos, "time step of the coupled system"),
    "dt_surrogate": (float, 0.01, _pos, "time step of averaged and deviation runs"),
    "t_burn": (float, -1.0, _any, "discarded initial time; negative means T/5"),
    "replicas": (int, 1, _pos, "Monte Carlo replicas"),
    "output_stride": (int, 1, _pos, "record every k-th step"),
    "u0_amplitude": (float, 0.0, _any, "u(0) = amplitude * phi_1"),
    "v0": ("choice:stationary,zero", "zero", _any, "fast initial condition"),
    "fast_stepper": ("choice:auto,exact,general", "auto", _any, "fast integrator"),
    "theta": (float, 0.1, _pos, "fast substep fraction of epsilon"),
    "kappa": (float, 0.05, lambda x: 0 < x < 1, "quantile level for the rate constant"),
    "record_modes": (int, 0, _nonneg, "coefficients written to trajectory.csv"),
    "bench_repeats": (int, 3, _pos, "timing repeats in the benchmark (min is kept)"),
    "seed": (int, 42, _nonneg, "base seed"),
    "C_f": (float, 1.0, _nonneg, "declared H1 constant"),
    "C_g": (float, 1.0, _nonneg, "declared Lipschitz constant of g"),
    "a": (float, 1.0, _nonneg, "declared H1 constant a"),
    "b": (float, 1.0, _nonneg, "declared H1 constant b"),
    "c": ("optfloat", None, _nonneg, "declared H1 constant c (empty: fit on lattice)"),
    "d": (float, 1.0, _nonneg, "declared H2 constant d"),
    "e": (float, 1.0, _nonneg, "declared H2 constant e"),
}

DEFAULTS = {k: v[1] for k, v in _SCHEMA.items()}
DEFAULTS["L_grid"] = tuple(round(0.8 + 0.1 * i, 10) for i in range(13))

SUBCOMMAND_DEFAULTS = {
    "simulate": dict(T=6.0, dt=1e-3, q2_power=2.0, v0="zero", output_stride=10),
    "average": dict(T=20.0, dt=0.01, u0_amplitude=0.2, output_stride=10),
    "deviation": dict(T=128.0, dt=0.02, output_stride=5),
    "convergence": dict(
        T=2.0, dt=2e-4, replicas=64, u0_amplitude=0.2, v0="stationary", output_stride=10
    ),
    "bifurcation": dict(
        T=128.0, t_burn=28.0, dt=2e-3, dt_surrogate=0.01, u0_amplitude=0.1, v0="stationary",
        output_stride=5,
    ),
    "variance": dict(
        epsilons=(0.025, 0.05, 0.1, 0.2), T=128.0, dt=2e-3, dt_surrogate=0.02, replicas=8,
        v0="stationary", output_stride=5,
    ),
    "mixing": dict(dt=0.01, epsilon=0.1),
    "benchmark": dict(
        epsilons=(0.1, 0.01, 0.001), T=1.0, dt=0.01, dt_surrogate=0.01, fast_stepper="general",
        v0="stationary", u0_amplitude=0.0,
    ),
    "gaussianity": dict(
        epsilons=(0.05,), T=8.0, dt=2e-3, dt_surrogate=0.01, replicas=256, v0="stationary",
        output_stride=100,
    ),
    "audit": dict(),
}


@dataclass(frozen=True)
class ExperimentConfig:
    L: float
    N: int
    epsilon: float
    epsilons: tuple
    L_grid: tuple
    sigma1: float
    sigma2: float
    q1_kind: str
    q1_power: float
    q2_kind: str
    q2_power: float
    T: float
    dt: float
    dt_surrogate: float
    t_burn: float
    replicas: int
    output_stride: int
    u0_amplitude: float
    v0: str
    fast_stepper: str
    theta: float
    kappa: float
    record_modes: int
    bench_repeats: int
    seed: int
    C_f: float
    C_g: float
    a: float
    b: float
    c: float
    d: float
    e: float

    @property
    def burn_in(self):
        return self.T / 5.0 if self.t_burn < 0 else self.t_burn

    def to_mapping(self):
        """Canonical string form of every key (the manifest's config section)."""
        return {f.name: format_value(getattr(self, f.name)) for f in fields(self)}

    def to_text(self):
        return "".join(f"{k}={v}\n" for k, v in sorted(self.to_mapping().items()))

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]

    def with_overrides(self, **kw):
        return replace(self, **kw)


def format_value(v):
    if v is None:
        return ""
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_floats(text):
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValueError("range must be start:step:stop")
        start, step, stop = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ValueError("range needs a positive step and stop >= start")
        n = int(math.floor((stop - start) / step + 1e-9)) + 1
        return tuple(round(start + i * step, 12) for i in range(n))
    vals = tuple(float(p) for p in text.split(",") if p.strip())
    if not vals:
        raise ValueError("empty list")
    return vals


def _convert(key, raw):
    typ, _, check, _ = _SCHEMA[key]
    raw = raw.strip()
    if typ is float:
        val = float(raw)
        if not math.isfinite(val):
            raise ValueError("not finite")
    elif typ is int:
        val = int(raw)
    elif typ == "floats":
        val = _parse_floats(raw)
        if not all(math.isfinite(x) for x in val):
            raise ValueError("not finite")
        if not all(check(x) for x in val):
            raise ParameterError(f"value out of range for {key}: {raw}")
        return val
    elif typ == "optfloat":
        val = None if raw in ("", "auto", "none") else float(raw)
        if val is None:
            return None
    elif typ == "kind":
        if raw not in ("resolvent_power", "cylindrical"):
            raise ParameterError(f"unknown covariance kind for {key}: {raw!r}")
        return raw
    elif typ.startswith("choice:"):
        options = typ.split(":", 1)[1].split(",")
        if raw not in options:
            raise ParameterError(f"{key} must be one of {options}, got {raw!r}")
        return raw
    else:  # pragma: no cover
        raise AssertionError(typ)
    if not check(val):
        raise ParameterError(f"value out of range for {key}: {raw}")
    return val


def parse_text(text, path="<config>"):
    """Parse ``key=value`` lines into a dict of converted values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"malformed line (expected key=value): {line.strip()!r}", path, lineno)
        key, raw = (s.strip() for s in body.split("=", 1))
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", path, lineno)
        try:
            out[key] = _convert(key, raw)
        except ParameterError as exc:
            raise ConfigError(str(exc), path, lineno) from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})", path, lineno) from None
    return out


def _read_file(path):
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config file not found", path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid manifest JSON ({exc})", path, exc.lineno) from None
        cfg = data.get("config") if isinstance(data, dict) else None
        if not isinstance(cfg, dict):
            raise ConfigError("manifest has no config section", path)
        text = "".join(f"{k}={v}\n" for k, v in cfg.items())
    return parse_text(text, path)


def parse_config(path=None, overrides=None, subcommand=None):
    """Resolve defaults, subcommand defaults, file values and flag overrides."""
    values = dict(DEFAULTS)
    if subcommand is not None:
        if subcommand not in SUBCOMMAND_DEFAULTS:
            raise ConfigError(f"unknown subcommand {subcommand!r}")
        values.update(SUBCOMMAND_DEFAULTS[subcommand])
    if path is not None:
        values.update(_read_file(path))
    for key, raw in (overrides or {}).items():
        if key not in _SCHEMA:
            raise ConfigError(f"unknown key {key!r}", "<flags>")
        try:
            values[key] = _convert(key, str(raw))
        except ParameterError as exc:
            raise ConfigError(str(exc), "<flags>") from None
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})", "<flags>") from None
    cfg = ExperimentConfig(**values)
    if cfg.replicas < 1:
        raise ConfigError("replicas must be >= 1")
    return cfg


def reference_table():
    """Markdown table of keys, defaults and meanings."""
    rows = ["| key | default | meaning |", "|---|---|---|"]
    for k, (_, _, _, desc) in _SCHEMA.items():
        rows.append(f"| `{k}` | `{format_value(DEFAULTS[k])}` | {desc} |")
    return "\n".join(rows)
