"""Figure rendering for benchmark reports.

Renders alongside the delimited output: a per-group error boxplot
comparing the two inverse routes, and a gallery of the L-curves with
their selected corners.  File-only output (Agg backend), no display.
"""

from __future__ import annotations

import csv
import glob
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_METHOD_COLOR = {"epicardial": "#b3542e", "volumetric": "#2e6eb3"}


def _collect(rows, metric: str) -> tuple[list, list, list]:
    groups = sorted({r["seed_class"] for r in rows if r["status"] == "ok"})
    data, labels, colors = [], [], []
    for group in groups + ["all"]:
        for method in ("epicardial", "volumetric"):
            vals = [
                r[metric]
                for r in rows
                if r["status"] == "ok"
                and r["method"] == method
                and (group == "all" or r["seed_class"] == group)
                and r[metric] is not None
                and np.isfinite(r[metric])
            ]
            data.append(vals)
            labels.append(f"{group}\n{method[:3]}")
            colors.append(_METHOD_COLOR[method])
    return data, labels, colors


def error_boxplot(report, path: str):
    """Localization-error distributions per seed class and method."""
    fig, axes = plt.subplots(1, 2, figsize=(11, 4.5), sharey=False)
    for ax, metric, title in zip(
        axes,
        ("euclid_mm", "geodesic_mm"),
        ("Euclidean error", "Geodesic error"),
    ):
        data, labels, colors = _collect(report.rows, metric)
        if not any(len(d) for d in data):
            ax.set_title(f"{title} (no data)")
            continue
        box = ax.boxplot(data, tick_labels=labels, patch_artist=True, widths=0.7)
        for patch, color in zip(box["boxes"], colors):
            patch.set_facecolor(color)
            patch.set_alpha(0.6)
        for med in box["medians"]:
            med.set_color("black")
        ax.set_title(title)
        ax.set_ylabel("mm")
        ax.tick_params(axis="x", labelsize=7)
        ax.grid(True, axis="y", alpha=0.3)
    fig.suptitle("Origin localization error by seed class")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _read_lcurve(path: str):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    lam = np.array([float(r["lambda"]) for r in rows])
    rho = np.array([float(r["rho"]) for r in rows])
    eta = np.array([float(r["eta"]) for r in rows])
    kap = np.array([float(r["curvature"]) for r in rows])
    corner = int(np.argmin(kap)) if len(kap) else 0
    return lam, rho, eta, corner


def lcurve_gallery(lcurve_dir: str, path: str, max_curves: int = 8):
    """Log-log residual/seminorm traces with corner markers."""
    files = sorted(glob.glob(os.path.join(lcurve_dir, "*.csv")))[:max_curves]
    if not files:
        return
    cols = min(4, len(files))
    rows = (len(files) + cols - 1) // cols
    fig, axes = plt.subplots(rows, cols, figsize=(3.1 * cols, 2.9 * rows), squeeze=False)
    for ax in axes.flat[len(files):]:
        ax.set_visible(False)
    for ax, fname in zip(axes.flat, files):
        lam, rho, eta, corner = _read_lcurve(fname)
        ax.loglog(rho, eta, "-", color="#555555", lw=1.0)
        ax.loglog(rho[corner], eta[corner], "o", color="#b3542e", ms=6)
        ax.set_title(os.path.splitext(os.path.basename(fname))[0], fontsize=8)
        ax.tick_params(labelsize=6)
    fig.suptitle("L-curves (marker: selected corner)")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
