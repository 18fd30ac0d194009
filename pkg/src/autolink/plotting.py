"""Figures written next to the JSON outputs, plus the side-by-side panels."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .diffgeom import EdgeGraph, render_edge_map, soft_argmax  # noqa: E402
from .numcore import Tensor, inverse_softplus  # noqa: E402

VIS_SIGMA2 = 5e-4
PNG_META = {"Software": None}


def keypoint_colors(k: int) -> list[tuple[int, int, int]]:
    cmap = plt.get_cmap("tab10" if k <= 10 else "tab20")
    return [tuple(int(round(255 * c)) for c in cmap(i % cmap.N)[:3]) for i in range(k)]


def plot_loss_curve(steps, losses, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(steps, losses, lw=0.8, color="0.3")
    if len(losses) >= 50:
        win = max(len(losses) // 50, 5)
        smooth = np.convolve(losses, np.ones(win) / win, mode="valid")
        ax.plot(steps[win - 1 :], smooth, lw=1.6, color="C3", label=f"{win}-step mean")
        ax.legend(frameon=False)
    ax.set_xlabel("step")
    ax.set_ylabel("reconstruction loss")
    ax.set_yscale("log")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)


def plot_graph(weights: np.ndarray, mean_kps: np.ndarray, labels: np.ndarray, path) -> None:
    """Edge-weight matrix beside the graph drawn over mean keypoint positions."""
    k = len(weights)
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(8, 3.8))
    im = ax0.imshow(weights, cmap="viridis")
    ax0.set_title("edge weights")
    ax0.set_xticks(range(k))
    ax0.set_yticks(range(k))
    fig.colorbar(im, ax=ax0, fraction=0.046)
    top = weights.max() if weights.max() > 0 else 1.0
    for i in range(k):
        for j in range(i + 1, k):
            a = weights[i, j] / top
            if a > 0.02:
                ax1.plot(*mean_kps[[i, j]].T, color="k", alpha=float(a), lw=0.5 + 2.5 * a)
    ax1.scatter(mean_kps[:, 0], mean_kps[:, 1], c=[f"C{int(c)}" for c in labels], s=40, zorder=3)
    for i, (x, y) in enumerate(mean_kps):
        ax1.annotate(str(i), (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    ax1.set_xlim(-1, 1)
    ax1.set_ylim(1, -1)
    ax1.set_aspect("equal")
    ax1.set_title("graph (color = spectral cluster)")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)


def plot_landmark_errors(names, errors, path) -> None:
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.bar(range(len(errors)), errors, color="C0")
    ax.set_xticks(range(len(errors)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("normalized error")
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)


# -------------------------------------------------------------- image panels
def visualization_graph(graph: EdgeGraph) -> EdgeGraph:
    """Copy of ``graph`` at the display thickness with weights scaled to max 1."""
    vis = EdgeGraph(graph.n_keypoints, VIS_SIGMA2, "fixed", graph.heatmap_mode, dtype=np.float64)
    if graph.heatmap_mode == "per_edge_channel":
        vis = EdgeGraph(graph.n_keypoints, VIS_SIGMA2, "fixed", "max_combined", dtype=np.float64)
    w = graph.weights().astype(np.float64)
    w = w / w.max()
    target = vis.weight_param()
    target.data[:] = [inverse_softplus(max(v, 1e-12)) for v in w]
    return vis


def edge_map_u8(edge: np.ndarray) -> np.ndarray:
    """(h, w) map scaled by its maximum into 8-bit grayscale."""
    top = edge.max()
    scaled = edge / top if top > 0 else edge
    return np.round(np.clip(scaled, 0.0, 1.0) * 255).astype(np.uint8)


def render_panels(state, image_u8: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Original | keypoints | edge map for one (3, S, S) uint8 image.

    Returns the (S, 3S, 3) panel strip, the (K, 2) keypoints and the (S, S)
    grayscale edge map.
    """
    size = image_u8.shape[-1]
    x = Tensor(image_u8[None].astype(state.dtype) / state.dtype.type(255.0))
    kps = soft_argmax(state.encoder(x)).data[0].astype(np.float64)
    edge = render_edge_map(Tensor(kps[None]), visualization_graph(state.graph), size, size).data[0, 0]
    edge8 = edge_map_u8(edge)

    rgb = image_u8.transpose(1, 2, 0)
    overlay = Image.fromarray(rgb.copy())
    draw = ImageDraw.Draw(overlay)
    r = max(1.0, size / 40.0)
    for (px, py), color in zip(keypoint_pixels(kps, size), keypoint_colors(len(kps))):
        draw.ellipse([px - r, py - r, px + r, py + r], fill=color)
    strip = np.concatenate([rgb, np.asarray(overlay), np.repeat(edge8[..., None], 3, axis=2)], axis=1)
    return strip, kps, edge8


def keypoint_pixels(kps: np.ndarray, size: int) -> np.ndarray:
    """Normalized [-1, 1] coordinates to pixel-center coordinates."""
    return (np.asarray(kps) + 1.0) * 0.5 * (size - 1)


def save_png(arr: np.ndarray, path) -> None:
    Image.fromarray(arr).save(Path(path), format="PNG")
