"""Figures written next to result CSVs. Headless (Agg) only."""

from __future__ import annotations

import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def new_figure(width: float = 6.0, height: float | None = None, ncols: int = 1):
    height = width * GOLDEN / (1 if ncols == 1 else ncols / 1.5) if height is None else height
    fig, axes = plt.subplots(1, ncols, figsize=(width, height), squeeze=False)
    for ax in axes[0]:
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    return fig, list(axes[0])


def savefig(fig, path, dpi: int = 150) -> Path:
    """Save and close; the format follows the suffix (``.png`` if none)."""
    path = Path(path)
    if not path.suffix:
        path = path.with_suffix(".png")
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path


def plot_fundamental_diagram(samples, fit=None, path="fd.png") -> Path:
    fig, (ax,) = new_figure()
    rho = np.array([s.density for s in samples])
    q = np.array([s.flow for s in samples]) * 3600.0
    steady = np.array([s.steady for s in samples], dtype=bool)
    ax.scatter(rho[steady], q[steady], s=12, color="tab:blue", label="steady window")
    if (~steady).any():
        ax.scatter(rho[~steady], q[~steady], s=12, marker="x", color="tab:gray", label="flagged")
    if fit is not None:
        grid = np.linspace(0.0, max(rho.max(), fit.rho_star) * 1.1, 200)
        ax.plot(grid, fit.curve(grid) * 3600.0, color="tab:red", label=f"{fit.family} fit")
        ax.axvline(fit.rho_star, color="tab:red", ls=":", lw=1)
    ax.set_xlabel("occupancy")
    ax.set_ylabel("flow (veh/h)")
    ax.legend(frameon=False, fontsize=8)
    return savefig(fig, path)


def plot_poc(results, path="poc.png") -> Path:
    """Per-controller medians of time-to-jam, throughput and mean speed.

    A controller that never jams is drawn as a hatched bar above the rest.
    """
    kinds = list(dict.fromkeys(r.controller for r in results))
    fig, axes = new_figure(width=10.0, ncols=3)
    panels = (("time_to_jam", "time to jam (s)"), ("throughput", "vehicles out"),
              ("speed_avg", "mean speed (km/h)"))
    for ax, (attr, label) in zip(axes, panels):
        vals = []
        for k in kinds:
            xs = np.array([getattr(r, attr) for r in results if r.controller == k], dtype=float)
            vals.append(np.median(xs))
        finite = [v for v in vals if math.isfinite(v)]
        cap = max(finite) * 1.2 if finite else 1.0
        shown = [v if math.isfinite(v) else cap for v in vals]
        bars = ax.bar(range(len(kinds)), shown, color="tab:blue")
        for b, v in zip(bars, vals):
            if not math.isfinite(v):
                b.set_hatch("//")
                b.set_facecolor("white")
                b.set_edgecolor("tab:blue")
        ax.set_xticks(range(len(kinds)), kinds, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel(label)
    return savefig(fig, path)


def plot_report(reports, labels=None, path="report.png",
                metrics=("VEHARR", "SPEEDAVG", "DELAYAVG", "STOPSAVG")) -> Path:
    fig, axes = new_figure(width=10.0, ncols=len(metrics))
    labels = labels or [f"seed {r.meta.get('seed', i)}" for i, r in enumerate(reports)]
    for ax, m in zip(axes, metrics):
        vals = [getattr(r, m) for r in reports]
        ax.bar(range(len(vals)), vals, color="tab:blue")
        ax.axhline(float(np.mean(vals)), color="tab:red", lw=1)
        ax.set_xticks(range(len(vals)), labels, rotation=30, ha="right", fontsize=7)
        ax.set_title(m, fontsize=9)
    return savefig(fig, path)


def plot_training(history, path="training.png") -> Path:
    fig, (ax1, ax2) = new_figure(width=9.0, ncols=2)
    ep = [h["episode"] for h in history]
    ax1.plot(ep, [h["return"] for h in history], color="tab:blue")
    ax1.set_xlabel("episode")
    ax1.set_ylabel("return")
    loss = [h["loss"] if h["loss"] is not None else np.nan for h in history]
    ax2.semilogy(ep, loss, color="tab:orange")
    ax2.set_xlabel("episode")
    ax2.set_ylabel("mean TD loss")
    return savefig(fig, path)
