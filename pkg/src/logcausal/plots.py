"""SVG figures with their plotted numbers in sidecar CSVs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import pandas as pd  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
WIDTH = 5.0

RC = {
    "figure.figsize": (WIDTH, WIDTH * GOLDEN),
    "font.family": "serif",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "savefig.bbox": "tight",
    # fixed ids and no timestamp so the same data gives the same bytes
    "svg.hashsalt": "logcausal",
    "svg.fonttype": "path",
}

BAND = "0.8"
LINE = "k"


def figsize(scale: float = 1.0, rows: int = 1):
    """Width ``WIDTH * scale`` with a golden-ratio height per panel row."""
    w = WIDTH * scale
    return (w, w * GOLDEN * rows)


def _save(fig, frame: pd.DataFrame, path) -> dict:
    """Write ``path`` (SVG) and ``path`` with a ``.csv`` suffix."""
    base, _ = os.path.splitext(str(path))
    svg, csv = base + ".svg", base + ".csv"
    with plt.rc_context(RC):
        fig.savefig(svg, format="svg", metadata={"Date": None})
    plt.close(fig)
    frame.to_csv(csv, index=False, float_format="%.17g")
    return {"svg": svg, "csv": csv}


def read_sidecar(path) -> pd.DataFrame:
    base, _ = os.path.splitext(str(path))
    return pd.read_csv(base + ".csv", float_precision="round_trip")


def plot_effect_curve(curve, path) -> dict:
    """Posterior mean effect against proclivity with a 95% band.

    Args:
        curve: a PrincipalEffectCurve.
        path: output path; the extension is replaced by ``.svg``.

    Returns:
        Mapping with the ``svg`` and ``csv`` paths.
    """
    frame = curve.to_frame()
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.fill_between(frame.r, frame.tau_q025, frame.tau_q975, color=BAND, lw=0, label="95% interval")
        ax.plot(frame.r, frame.tau_mean, color=LINE, label="posterior mean")
        ax.axhline(0, color="0.5", lw=0.6, ls=":")
        ax.set_xlabel(r"hint proclivity $\eta(1)$")
        ax.set_ylabel(r"principal effect $\tau(\eta)$")
        ax.legend(loc="best")
    return _save(fig, frame, path)


def plot_ppc(densities: dict, path) -> dict:
    """Observed outcome density over the replicated envelope, one panel per group."""
    groups = list(densities)
    parts = []
    with plt.rc_context(RC):
        fig, axes = plt.subplots(1, len(groups), figsize=figsize(1.0 * len(groups) / 1.5), squeeze=False)
        for ax, g in zip(axes[0], groups):
            f = densities[g].to_frame()
            ax.fill_between(f.y, f.rep_min, f.rep_max, color=BAND, lw=0, label="replicates")
            ax.plot(f.y, f.observed, color=LINE, label="observed")
            ax.set_title(g)
            ax.set_xlabel("outcome")
            parts.append(f.assign(group=g))
        axes[0][0].set_ylabel("density")
        axes[0][0].legend(loc="upper left")
    return _save(fig, pd.concat(parts, ignore_index=True), path)


def plot_residuals(table: pd.DataFrame, path) -> dict:
    """Outcome residuals against fitted values, coloured by arm."""
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        for z, mark in ((0, "o"), (1, "^")):
            t = table[table.Z == z]
            ax.scatter(t.fitted, t.residual, s=6, marker=mark, facecolor="none",
                       edgecolor="0.4" if z == 0 else "k", lw=0.5, label="control" if z == 0 else "treatment")
        ax.axhline(0, color="0.5", lw=0.6, ls=":")
        ax.set_xlabel("fitted")
        ax.set_ylabel("residual")
        ax.legend(loc="best")
    return _save(fig, table, path)


def plot_binned_residuals(table: pd.DataFrame, path) -> dict:
    """Binned hint-model residuals with +-2 SE bounds, one panel per draw."""
    draws = list(pd.unique(table["draw"]))
    ncol = int(np.ceil(np.sqrt(len(draws))))
    nrow = int(np.ceil(len(draws) / ncol))
    with plt.rc_context(RC):
        fig, axes = plt.subplots(nrow, ncol, figsize=figsize(1.2, nrow / ncol * 1.5), sharex=True, sharey=True,
                                 squeeze=False)
        for ax, d in zip(axes.ravel(), draws):
            t = table[table["draw"] == d].sort_values("p_mean")
            ax.plot(t.p_mean, 2 * t.se, color="0.5", lw=0.6)
            ax.plot(t.p_mean, -2 * t.se, color="0.5", lw=0.6)
            ax.scatter(t.p_mean, t.residual, s=5, color=LINE)
            ax.axhline(0, color="0.5", lw=0.4, ls=":")
        for ax in axes.ravel()[len(draws):]:
            ax.set_visible(False)
        fig.supxlabel("expected hint probability", fontsize=9)
        fig.supylabel("average residual", fontsize=9)
    return _save(fig, table, path)


def plot_balance(balance: pd.DataFrame, path) -> dict:
    """Standardized differences before and after matching, one row per covariate."""
    b = balance.reset_index(drop=True)
    y = np.arange(len(b))[::-1]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(WIDTH * 0.8, max(2.0, 0.18 * len(b) + 0.6)))
        ax.scatter(b.pre_std_diff, y, marker="o", facecolor="none", edgecolor=LINE, s=14, label="before")
        ax.scatter(b.post_std_diff, y, marker="o", color=LINE, s=10, label="after")
        ax.axvline(0, color="0.5", lw=0.6)
        ax.set_yticks(y)
        ax.set_yticklabels(b.covariate)
        ax.set_xlabel("standardized difference")
        ax.legend(loc="lower right")
    return _save(fig, b, path)


def plot_hint_rates(table: pd.DataFrame, cutoff: float, path) -> dict:
    """Histogram of student hint rates with the dichotomization cutoff."""
    counts, edges = np.histogram(table["hbar"].to_numpy(float), bins=20, range=(0.0, 1.0))
    frame = pd.DataFrame({"lo": edges[:-1], "hi": edges[1:], "count": counts, "cutoff": cutoff})
    with plt.rc_context(RC):
        fig, ax = plt.subplots()
        ax.stairs(counts, edges, color=LINE, fill=False)
        ax.axvline(cutoff, color="0.4", ls="--", lw=0.8)
        ax.set_xlabel(r"hint rate $\bar h$")
        ax.set_ylabel("students")
    return _save(fig, frame, path)
