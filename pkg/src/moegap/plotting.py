"""Figures for the analysis and gap-demo reports (needs the ``plot`` extra)."""
from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

GOLDEN = (math.sqrt(5) - 1.0) / 2.0
STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def _figure(width: float = 5.0, ncols: int = 1):
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(width, width * GOLDEN))
    return fig, axes


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with plt.rc_context(STYLE):
        fig.savefig(path)
    plt.close(fig)
    return path


def plot_gap_series(rows, correlation, path) -> Path:
    """Weight and activation MSO against lambda on a shared log y axis."""
    lam = [r.lam for r in rows]
    x = range(len(lam))
    fig, ax = _figure()
    ax.plot(x, [r.weight_mso for r in rows], "o-", color="tab:blue", label="weight MSO")
    ax.plot(x, [r.activation_mso for r in rows], "s-", color="tab:red", label="activation MSO")
    ax.set_yscale("log")
    ax.set_xticks(list(x))
    ax.set_xticklabels([f"{v:g}" for v in lam])
    ax.set_xlabel("lambda")
    ax.set_ylabel("mean squared overlap")
    if correlation is not None:
        ax.set_title(f"r = {correlation.r:.3f}, p = {correlation.p_two_sided:.3f}, n = {correlation.n}")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_layer_gaps(rows, path) -> Path:
    """Activation/weight ratio per layer, one line per lambda."""
    fig, ax = _figure()
    for lam in sorted({r.lam for r in rows}):
        sel = [r for r in rows if r.lam == lam]
        ax.plot([r.layer for r in sel], [r.ratio for r in sel], "o-", label=f"lambda={lam:g}")
    ax.set_yscale("log")
    ax.set_xlabel("layer")
    ax.set_ylabel("activation / weight MSO")
    ax.legend(frameon=False, ncol=2)
    return _save(fig, path)


def plot_gap_demo(report, path) -> Path:
    """Histogram of |cos| for the trace-zero arm next to the annihilated control."""
    fig, (a, b) = _figure(width=7.0, ncols=2)
    tz, ann = report.trace_zero, report.annihilated
    a.hist(tz.abs_cos, bins=50, color="tab:red")
    a.set_title(f"tr(W1^T W2) = 0: mean cos^2 = {tz.mean_sq_cos:.3f}")
    b.hist(ann.abs_cos, bins=50, color="tab:blue")
    b.set_title(f"W1^T W2 = 0: max |cos| = {ann.max_abs_cos:.1e}")
    for ax in (a, b):
        ax.set_xlabel("|cos(W1 x, W2 x)|")
    a.set_ylabel("count")
    return _save(fig, path)
