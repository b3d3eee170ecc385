"""Spectral-Galerkin simulation of slow-fast stochastic reaction-diffusion
systems, their averaged equation and the Gaussian deviation process."""

__version__ = "0.1.0"

from .errors import BlowUpError, ParameterError, UnsupportedFormError  # noqa: E402
from .spectral import build_grid  # noqa: E402
from .noise import make_covariance, derive_stream  # noqa: E402
from .dynamics import fhn_problem, eval_drift, hypothesis_audit  # noqa: E402
