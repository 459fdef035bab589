"""Diagnostic figures and delimited tables written next to CLI artifacts."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import ConnectionPatch  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
    "image.interpolation": "nearest",
}

# Agg stamps the matplotlib version into PNG metadata; drop it so figures are reproducible.
_PNG_META = {"Software": None}


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in row])


def _show(ax, raster, title):
    ax.imshow(raster.plane, cmap="gray" if raster.channels == 1 else None, vmin=0, vmax=255)
    ax.set_title(title)
    ax.set_axis_off()


def _save(fig, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)


def plot_matches(t1, t2, kps, inliers: Optional[np.ndarray], path) -> None:
    """Side-by-side epochs with keypoints coloured by pyramid level and inlier lines."""
    colours = {1: "tab:orange", 2: "tab:cyan", 4: "tab:pink"}
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(10, 5))
        _show(axes[0], t1, "T1")
        _show(axes[1], t2, "T2")
        for lv, col in colours.items():
            sel = kps.level == lv
            axes[0].scatter(kps.t1[sel, 0], kps.t1[sel, 1], s=4, c=col, label=f"stride {lv} ({sel.sum()})")
            axes[1].scatter(kps.t2[sel, 0], kps.t2[sel, 1], s=4, c=col)
        if inliers is not None and len(kps):
            for a, b in zip(kps.t1[inliers][::10], kps.t2[inliers][::10]):
                con = ConnectionPatch(
                    xyA=b, xyB=a, coordsA="data", coordsB="data", axesA=axes[1], axesB=axes[0],
                    color="yellow", lw=0.4, alpha=0.6)
                fig.add_artist(con)
        axes[0].legend(loc="lower left", markerscale=3)
        _save(fig, path)


def plot_change_overlay(t1, change_map, path, gt=None, overlap=None) -> None:
    """T1 with detected changes in red (and ground truth outlined in green when given)."""
    with plt.rc_context(STYLE):
        ncols = 3 if gt is not None else 2
        fig, axes = plt.subplots(1, ncols, figsize=(4.2 * ncols, 4.2))
        _show(axes[0], t1, "T1")
        axes[0].imshow(np.ma.masked_equal(change_map.binary.plane, 0), cmap="autumn", alpha=0.6)
        if gt is not None:
            axes[0].contour(gt.plane > 0, levels=[0.5], colors="lime", linewidths=0.6)
        if overlap is not None and not overlap.is_empty:
            v = np.asarray(overlap.vertices + overlap.vertices[:1])
            axes[0].plot(v[:, 0], v[:, 1], color="cyan", lw=0.8)
        im = axes[1].imshow(change_map.probs, cmap="magma", vmin=0, vmax=1)
        axes[1].set_title("change probability")
        axes[1].set_axis_off()
        fig.colorbar(im, ax=axes[1], fraction=0.046, pad=0.04)
        if gt is not None:
            _show(axes[2], gt, "ground truth")
        _save(fig, path)


def plot_scenario(t1, t2_distorted, gt_change, title: str, path) -> None:
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(12, 4.2))
        _show(axes[0], t1, "T1")
        _show(axes[1], t2_distorted, "T2 distorted")
        _show(axes[2], gt_change, "change ground truth")
        fig.suptitle(title)
        _save(fig, path)
