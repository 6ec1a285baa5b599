"""Figure rendering for experiment outputs.

Every experiment that writes delimited output also renders a matching
figure next to it; everything goes through the Agg backend so runs work
headless.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

DPI = 150


def _save(fig, path):
    fig.savefig(path, dpi=DPI, bbox_inches="tight")
    plt.close(fig)
    return str(path)


def flux_figure(flux, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    im = ax1.imshow(flux.values.T, origin="lower", extent=(0, 1, 0, 1), cmap="viridis")
    fig.colorbar(im, ax=ax1, label="J")
    ax1.set_xlabel("x1")
    ax1.set_ylabel("x2")
    ax1.set_title(f"boundary flux ({flux.grid_n} x {flux.grid_n})")
    c = flux.cell_centers()
    ax2.plot(c, flux.values.mean(axis=1), "k-", lw=1.5, label="mean over x2")
    ax2.fill_between(c, flux.values.min(axis=1), flux.values.max(axis=1), alpha=0.25)
    ax2.set_xlabel("x1")
    ax2.set_ylabel("J")
    ax2.legend(frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def decay_figure(series, fit, path, t_fit=None):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.semilogy(series.t, series.l1, "o", ms=3, label="|f| mass")
    ax1.semilogy(series.t, series.weighted_l1, "s", ms=3, alpha=0.6,
                 label="exit-weighted")
    if fit is not None:
        tt = np.linspace(series.t[0], series.t[-1], 100)
        ax1.semilogy(tt, fit.amplitude * np.exp(-fit.rate * tt), "k--", lw=1,
                     label=f"fit rate {fit.rate:.3g} (R2={fit.r_squared:.3f})")
    if t_fit is not None:
        ax1.axvspan(t_fit[0], t_fit[1], color="0.9", zorder=0)
    ax1.set_xlabel("t")
    ax1.set_ylabel("norm")
    ax1.legend(frameon=False, fontsize=8)
    ax2.semilogy(series.t, series.max_exp_moment, "o", ms=3, color="C3")
    ax2.set_xlabel("t")
    ax2.set_ylabel("max cell exponential moment")
    fig.tight_layout()
    return _save(fig, path)


def jacobian_figure(report, path):
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    centers = 0.5 * (report.bin_edges[1:] + report.bin_edges[:-1])
    width = report.bin_edges[1] - report.bin_edges[0]
    ax1.bar(centers, report.observed, width=width, alpha=0.5, label="sampled")
    ax1.plot(centers, report.expected, "k-", lw=1.5, label="jacobian prediction")
    ax1.set_xlabel("bounce time")
    ax1.set_ylabel("count")
    ax1.legend(frameon=False)
    rel = np.where(report.expected > 0,
                   (report.observed - report.expected) / report.expected, 0.0)
    ax2.plot(centers[report.populated], rel[report.populated], "o", ms=3)
    ax2.axhline(0, color="k", lw=0.5)
    ax2.set_xlabel("bounce time")
    ax2.set_ylabel("relative deviation")
    fig.tight_layout()
    return _save(fig, path)


def scaling_figure(fits_with_labels, path, reference_slopes=None):
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for k, (fit, label) in enumerate(fits_with_labels):
        ax.errorbar(fit.grid, fit.probs, yerr=3 * fit.ses, fmt="o", ms=4,
                    label=f"{label} (slope {fit.slope:.2f})", color=f"C{k}")
        xx = np.array([fit.grid[0], fit.grid[-1]])
        ax.plot(xx, np.exp(fit.intercept) * xx ** fit.slope, "--", color=f"C{k}", lw=1)
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("threshold")
    ax.set_ylabel("probability")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def residual_figure(curves_with_labels, path):
    fig, ax = plt.subplots(figsize=(4.8, 3.6))
    for curve, label in curves_with_labels:
        ax.errorbar(curve.depth, curve.values, yerr=3 * curve.ses, fmt="o-", ms=3,
                    lw=0.8, label=label)
    curve = curves_with_labels[0][0]
    ax.plot(curve.depth, np.minimum(curve.naive_bound, 1e3), "k:",
            label="naive compounding bound")
    ax.set_yscale("log")
    ax.set_xlabel("chain depth")
    ax.set_ylabel("surviving chain mass")
    ax.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def doeblin_figure(results, path):
    fig, ax = plt.subplots(figsize=(4.2, 3.4))
    steps = [r.steps for r in results]
    ax.bar(steps, [r.coupling for r in results], color="C0", width=0.6)
    ax.set_xlabel("chain steps N")
    ax.set_ylabel("row-overlap constant c")
    ax.set_xticks(steps)
    ax.set_ylim(0, 1)
    fig.tight_layout()
    return _save(fig, path)


def window_figure(rows, path):
    fig, ax = plt.subplots(figsize=(4.8, 3.4))
    n = [r.window for r in rows]
    ax.errorbar(n, [r.ratio for r in rows], yerr=[2 * r.ratio_se for r in rows],
                fmt="o", ms=4)
    ax.axhline(1.0, color="k", lw=0.8)
    ax.set_xlabel("window")
    ax.set_ylabel("norm ratio per window")
    fig.tight_layout()
    return _save(fig, path)
