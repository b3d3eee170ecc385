"""Static SVG renderings of the report tables.

Figures are written with a fixed hash salt and no date metadata so that
identical tables give byte-identical SVG files.
"""

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "svg.hashsalt": "avgspde",
    "svg.fonttype": "none",
    "font.family": "serif",
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 4,
}


def figsize(scale=1.0, ratio=None):
    width = 5.5 * scale
    ratio = (math.sqrt(5) - 1) / 2 if ratio is None else ratio
    return (width, width * ratio)


def _column(report, name):
    i = report.header.index(name)
    return np.array([row[i] for row in report.rows], dtype=float)


def _trajectory(report, ax):
    t = _column(report, "t")
    ax.plot(t, _column(report, "u_mid"), label="u(0, t)")
    v = _column(report, "v_mid")
    if np.any(np.isfinite(v)):
        ax.plot(t, v, lw=0.6, alpha=0.7, label="v(0, t)")
    ax.set_xlabel("t")
    ax.set_ylabel("mid-value")
    ax.legend()


def _convergence(report, ax):
    e = _column(report, "epsilon")
    eps = np.array(list(dict.fromkeys(e)))
    med = np.array(report.summary["median_sup_error"])
    ax.loglog(e, _column(report, "sup_error"), ".", color="0.75", ms=2)
    ax.loglog(eps, med, "o", label="median")
    slope = report.summary.get("slope")
    const = report.summary.get("constant")
    if slope is not None and math.isfinite(slope):
        grid = np.geomspace(eps.min(), eps.max(), 50)
        ax.loglog(grid, const * grid**slope, "-", label=f"fit slope {slope:.3f}")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("sup |u^eps - u|")
    ax.legend()


def _bifurcation(report, ax):
    L = _column(report, "L")
    ax.plot(L, _column(report, "rms_direct"), "o", label="direct RMS u^eps(0,t)")
    ax.plot(L, _column(report, "amp_averaged"), "-", label="averaged |u(0)|")
    thr = report.summary.get("threshold")
    if thr:
        ax.axvline(thr, ls=":", color="0.4", label=f"L = {thr:.4f}")
    ax.set_xlabel("L")
    ax.set_ylabel("amplitude")
    ax.legend()


def _variance(report, ax):
    e = _column(report, "epsilon")
    ax.loglog(e, _column(report, "var_direct"), "o", mfc="none", label="direct")
    ax.loglog(e, _column(report, "var_surrogate"), "x", label="deviation surrogate")
    grid = np.geomspace(e.min(), e.max(), 50)
    for label, ls in (("direct", "-"), ("surrogate", "--")):
        c = report.summary.get(f"c_{label}")
        beta = report.summary.get(f"beta_{label}")
        if c is not None and beta is not None:
            ax.loglog(grid, (c * grid**beta) ** 2, ls, lw=0.8,
                      label=f"({c:.3f} eps^{beta:.2f})^2")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("variance of u(0, t)")
    ax.legend()


def _mixing(report, ax):
    k = _column(report, "mode")
    ax.semilogy(k, _column(report, "exact"), "-", label="exact")
    ax.semilogy(k, _column(report, "measured"), "o", mfc="none", label="measured")
    ax.semilogy(k, _column(report, "bound"), ":", label="bound")
    ax.set_xlabel("mode k")
    ax.set_ylabel("one-step contraction")
    ax.legend()


def _bench(report, ax):
    e = _column(report, "epsilon")
    ax.loglog(e, _column(report, "t_direct_s"), "o-", label="direct")
    ax.loglog(e, _column(report, "t_surrogate_s"), "s-", label="averaged + deviation")
    ax.set_xlabel("epsilon")
    ax.set_ylabel("wall time [s]")
    ax.legend()


def _gaussianity(report, ax):
    e = _column(report, "epsilon")
    ax.bar(np.arange(len(e)), _column(report, "p_value"))
    ax.axhline(0.01, ls=":", color="0.4")
    ax.set_xticks(np.arange(len(e)), [("limit" if x == 0 else f"{x:g}") for x in e])
    ax.set_xlabel("epsilon")
    ax.set_ylabel("KS p-value")


def _audit(report, ax):
    ax.axis("off")
    for i, row in enumerate(report.rows):
        ax.text(0.0, 1 - 0.2 * i, f"{row[0]}  {row[1]}", transform=ax.transAxes)


_RENDERERS = {
    "trajectory": _trajectory,
    "convergence": _convergence,
    "bifurcation": _bifurcation,
    "variance": _variance,
    "mixing": _mixing,
    "bench": _bench,
    "gaussianity": _gaussianity,
    "audit": _audit,
}


def figure(report):
    """Matplotlib figure for ``report``; the caller closes it."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize())
        if report.rows:
            _RENDERERS[report.name](report, ax)
        fig.tight_layout()
    return fig


def render(report, path):
    """Write an SVG rendering of ``report`` to ``path``."""
    fig = figure(report)
    try:
        with plt.rc_context(STYLE):
            fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
