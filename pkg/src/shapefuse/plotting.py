"""Report figures: error heatmaps, error histograms and per-round energies.

All functions write a file and close their figure; the Agg backend is used
so nothing needs a display.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.collections import PolyCollection  # noqa: E402
from matplotlib.colors import LinearSegmentedColormap, Normalize  # noqa: E402

from .metrics import error_heatmap  # noqa: E402

STYLE = {
    "font.size": 9.0,
    "axes.titlesize": "medium",
    "axes.labelsize": "medium",
    "axes.linewidth": 0.8,
    "axes.edgecolor": "#555555",
    "xtick.direction": "in",
    "ytick.direction": "in",
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

BLUE_RED = LinearSegmentedColormap.from_list("blue_red", [(0.0, 0.0, 1.0), (1.0, 0.0, 0.0)])


def _mesh_view(ax, vertices, faces, face_colors, azimuth_deg: float):
    """Orthographic painter's-algorithm view about the vertical axis."""
    a = np.deg2rad(azimuth_deg)
    rot = np.array([[np.cos(a), 0.0, -np.sin(a)], [0.0, 1.0, 0.0], [np.sin(a), 0.0, np.cos(a)]])
    p = vertices @ rot.T
    tri = p[faces]
    normal_z = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])[:, 2]
    keep = normal_z > 0
    order = np.argsort(tri[keep, :, 2].mean(axis=1))
    polys = tri[keep][order][:, :, :2]
    shade = np.clip(0.55 + 0.45 * normal_z[keep][order] / (np.abs(normal_z).max() + 1e-30), 0.0, 1.0)
    cols = face_colors[keep][order] * (0.7 + 0.3 * shade[:, None])
    ax.add_collection(PolyCollection(polys, facecolors=np.clip(cols, 0, 1), edgecolors="none"))
    ax.set_xlim(p[:, 0].min() - 0.05, p[:, 0].max() + 0.05)
    ax.set_ylim(p[:, 1].min() - 0.05, p[:, 1].max() + 0.05)
    ax.set_aspect("equal")
    ax.axis("off")


def heatmap_figure(path, vertices, faces, distances_m, max_mm: float = 20.0, title: str | None = None) -> None:
    """Front and back views colored blue (0 mm) to red (>= max_mm)."""
    vertices = np.asarray(vertices, dtype=float)
    faces = np.asarray(faces)
    vcol = error_heatmap(distances_m, max_mm)
    fcol = vcol[faces].mean(axis=1)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 2, figsize=(6.0, 5.0))
        for ax, az, label in zip(axes, (0.0, 180.0), ("front", "back")):
            _mesh_view(ax, vertices, faces, fcol, az)
            ax.set_title(label)
        sm = plt.cm.ScalarMappable(norm=Normalize(0.0, max_mm), cmap=BLUE_RED)
        fig.colorbar(sm, ax=axes, fraction=0.04, label="distance [mm]")
        if title:
            fig.suptitle(title)
        fig.savefig(path)
        plt.close(fig)


def error_histogram(path, recon_to_gt_m, gt_to_recon_m, max_mm: float = 20.0) -> None:
    a = np.asarray(recon_to_gt_m) * 1000.0
    b = np.asarray(gt_to_recon_m) * 1000.0
    bins = np.linspace(0.0, max(max_mm, 1e-3), 41)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.hist(np.clip(a, 0, max_mm), bins=bins, histtype="step", label="reconstruction to GT")
        ax.hist(np.clip(b, 0, max_mm), bins=bins, histtype="step", label="GT to reconstruction")
        ax.set_xlabel("vertex-to-surface distance [mm]")
        ax.set_ylabel("vertices")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def energy_figure(path, report: dict) -> None:
    """Robust energy at the start and end of each alternation round."""
    rounds = report.get("rounds", [])
    r = [e["round"] for e in rounds if "energy" in e]
    start = [e["energy_start"] for e in rounds if "energy" in e]
    end = [e["energy"] for e in rounds if "energy" in e]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(r, start, marker="o", ls="--", label="after re-association")
        ax.plot(r, end, marker="s", label="after solve")
        ax.set_xlabel("round")
        ax.set_ylabel("energy")
        ax.set_yscale("log")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
