"""Figures written next to CLI reports.  Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _extent(grid):
    return (0.0, 360.0, 180.0, 0.0)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_map(data: np.ndarray, grid, path, title: str = "", cmap: str = "viridis",
             vmin=None, vmax=None, label: str = "") -> Path:
    """Equirectangular image of one channel (longitude across, colatitude down)."""
    fig, ax = plt.subplots(figsize=(7, 3.6))
    im = ax.imshow(data, extent=_extent(grid), aspect="auto", cmap=cmap, vmin=vmin, vmax=vmax,
                   interpolation="nearest")
    ax.set_xlabel("longitude (deg)")
    ax.set_ylabel("colatitude (deg)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label=label)
    return _save(fig, path)


def plot_labels(labels: np.ndarray, grid, path, title: str = "") -> Path:
    return plot_map(labels, grid, path, title, cmap="tab20", label="region")


def plot_jacobian(det: np.ndarray, grid, path, title: str = "Jacobian determinant") -> Path:
    """Diverging colormap centered at 1; folded cells (det <= 0) in black."""
    spread = max(float(np.max(np.abs(det - 1.0))), 1e-6)
    cmap = plt.get_cmap("RdBu_r").copy()
    cmap.set_under("black")
    return plot_map(det, grid, path, title, cmap=cmap, vmin=max(1.0 - spread, 1e-12),
                    vmax=1.0 + spread, label="areal distortion")


def plot_displacement(d: np.ndarray, grid, path, title: str = "displacement", stride: int = 4) -> Path:
    """Speed on the sphere with a sparse quiver of (east, south) components."""
    s = grid.sin_lat[:, None]
    east, south = s * d[0], d[1]
    speed = np.hypot(east, south)
    fig, ax = plt.subplots(figsize=(7, 3.6))
    im = ax.imshow(speed, extent=_extent(grid), aspect="auto", cmap="magma")
    lon = np.degrees(grid.longitudes)[::stride]
    lat = np.degrees(grid.latitudes)[::stride]
    X, Y = np.meshgrid(lon, lat)
    ax.quiver(X, Y, east[::stride, ::stride], -south[::stride, ::stride], color="white",
              angles="xy", width=0.002)
    ax.set_xlim(0, 360)
    ax.set_ylim(180, 0)
    ax.set_xlabel("longitude (deg)")
    ax.set_ylabel("colatitude (deg)")
    ax.set_title(title)
    fig.colorbar(im, ax=ax, label="rad")
    return _save(fig, path)


def plot_loss(trace, path, title: str = "loss", xlabel: str = "iteration") -> Path:
    trace = np.asarray(trace, dtype=np.float64)
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(np.arange(len(trace)), trace)
    if len(trace) and np.all(trace > 0):
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_lambda_curve(lams, scores, path, chosen=None) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.semilogx(lams, scores, "o-")
    if chosen is not None:
        ax.axvline(chosen, color="k", ls="--", lw=0.8)
    ax.set_xlabel("lambda")
    ax.set_ylabel("validation Dice")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_dice_bars(dice: dict, path, title: str = "Dice per region") -> Path:
    keys = sorted(dice, key=lambda k: int(k))
    fig, ax = plt.subplots(figsize=(6, 3.2))
    ax.bar([str(k) for k in keys], [dice[k] for k in keys], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_xlabel("region")
    ax.set_ylabel("Dice")
    ax.set_title(title)
    return _save(fig, path)
