"""Keypoints from heatmaps and differentiable edge maps from keypoints.

Coordinates are normalized to [-1, 1] with the endpoint-inclusive convention
``p = -1 + 2 * idx / (n - 1)`` on every grid, so heatmap cells and image
pixels share one coordinate system. Keypoints are stored as (x, y) pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .numcore import (
    Param,
    Tensor,
    _accumulate,
    _result,
    as_tensor,
    inverse_softplus,
    matmul,
    reshape,
    sigmoid_np,
    softplus_np,
    spatial_softmax,
)

HEATMAP_MODES = ("max_combined", "per_edge_channel", "keypoints_only")
THICKNESS_MODES = ("fixed", "shared_learnable", "per_edge_learnable")


def normalized_grid(n: int, dtype=np.float64) -> np.ndarray:
    if n < 2:
        raise ValueError(f"grid needs at least 2 samples per axis, got {n}")
    return (-1.0 + 2.0 * np.arange(n) / (n - 1)).astype(dtype)


def pixel_coords(h: int, w: int, dtype=np.float64) -> np.ndarray:
    """(h*w, 2) array of (x, y) pixel centers in row-major order."""
    xs = normalized_grid(w, dtype)
    ys = normalized_grid(h, dtype)
    return np.stack([np.tile(xs, h), np.repeat(ys, w)], axis=1)


def pair_index(k: int) -> list[tuple[int, int]]:
    """All (i, j) with i < j in lexicographic order; position = edge id."""
    return list(combinations(range(k), 2))


def soft_argmax(heatmaps: Tensor) -> Tensor:
    """Expected grid coordinate under a per-channel spatial softmax.

    Args:
        heatmaps: (..., K, h, w) logits.

    Returns:
        (..., K, 2) keypoints, each a convex combination of grid positions.
    """
    h, w = heatmaps.shape[-2:]
    if h < 2 or w < 2:
        raise ValueError(f"soft_argmax needs h, w >= 2, got {h}x{w}")
    probs = spatial_softmax(heatmaps)
    flat = reshape(probs, heatmaps.shape[:-2] + (h * w,))
    grid = Tensor(pixel_coords(h, w, heatmaps.dtype))
    return matmul(flat, grid)


def segment_distance(p, k_i, k_j) -> tuple[Tensor, Tensor]:
    """Distance from ``p`` to the segment k_i -> k_j and the projection ratio t.

    All three arguments are broadcastable (..., 2) arrays or tensors. ``t`` is
    the unclamped projection parameter; the distance uses it clamped to [0, 1].
    A zero-length segment yields t = 0 and the distance to k_i.
    """
    p, k_i, k_j = (as_tensor(a) for a in (p, k_i, k_j))
    dtype = np.result_type(p.dtype, k_i.dtype, k_j.dtype)
    pd, a, b = (np.asarray(t.data, dtype=dtype) for t in (p, k_i, k_j))
    e = b - a
    length2 = (e * e).sum(-1)
    rel = pd - a
    safe = np.where(length2 > 0, length2, 1.0)
    t = np.where(length2 > 0, (rel * e).sum(-1) / safe, 0.0)
    tau = np.clip(t, 0.0, 1.0)
    r = rel - tau[..., None] * e
    d = np.sqrt((r * r).sum(-1))
    shape = d.shape
    nz = d > 0
    unit = np.where(nz[..., None], r / np.where(nz, d, 1.0)[..., None], 0.0)

    def d_backward(g):
        gu = g[..., None] * unit
        _accumulate(p, _reduce_to(gu, p.shape))
        _accumulate(k_i, _reduce_to(-gu * (1.0 - tau)[..., None], k_i.shape))
        _accumulate(k_j, _reduce_to(-gu * tau[..., None], k_j.shape))

    def t_backward(g):
        live = (length2 > 0)[..., None]
        inv = np.where(length2 > 0, 1.0 / safe, 0.0)[..., None]
        dt_dp = e * inv
        dt_dkj = rel * inv - 2.0 * t[..., None] * e * inv
        dt_dki = -dt_dp - dt_dkj
        gg = g[..., None] * live
        _accumulate(p, _reduce_to(gg * dt_dp, p.shape))
        _accumulate(k_i, _reduce_to(gg * dt_dki, k_i.shape))
        _accumulate(k_j, _reduce_to(gg * dt_dkj, k_j.shape))

    d_t = _result(d.reshape(shape), (p, k_i, k_j), d_backward, "segment_distance.d")
    t_t = _result(np.asarray(t), (p, k_i, k_j), t_backward, "segment_distance.t")
    return d_t, t_t


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class EdgeGraph:
    """The graph shared by every image: edge weights, thickness and alpha.

    Effective weights and thicknesses are softplus of unconstrained raw
    parameters. Raw edge weights start at 0 (weight ln 2); learnable
    thicknesses start at the raw value whose softplus is ``sigma2``.
    """

    def __init__(
        self,
        n_keypoints: int,
        sigma2: float = 5e-5,
        thickness_mode: str = "fixed",
        heatmap_mode: str = "max_combined",
        dtype=np.float32,
    ):
        if thickness_mode not in THICKNESS_MODES:
            raise ValueError(f"thickness_mode must be one of {THICKNESS_MODES}, got {thickness_mode!r}")
        if heatmap_mode not in HEATMAP_MODES:
            raise ValueError(f"heatmap_mode must be one of {HEATMAP_MODES}, got {heatmap_mode!r}")
        if sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        if heatmap_mode != "keypoints_only" and n_keypoints < 2:
            raise ValueError(f"edge modes need at least 2 keypoints, got {n_keypoints}")
        self.n_keypoints = n_keypoints
        self.sigma2 = float(sigma2)
        self.thickness_mode = thickness_mode
        self.heatmap_mode = heatmap_mode
        self.dtype = np.dtype(dtype)
        self.pairs = pair_index(n_keypoints)
        n_edges = len(self.pairs)
        self.raw_weights = Param(np.zeros(n_edges, dtype=dtype), group="edge_weight")
        self.per_point_weights = Param(np.zeros(n_keypoints, dtype=dtype), group="edge_weight")
        self.alpha = Param(np.ones((), dtype=dtype), group="alpha")
        n_thick = {"fixed": 0, "shared_learnable": 1, "per_edge_learnable": self.n_primitives}[thickness_mode]
        self.raw_thickness = (
            Param(np.full(n_thick, inverse_softplus(self.sigma2), dtype=dtype), group="thickness")
            if n_thick
            else None
        )

    @property
    def n_edges(self) -> int:
        return len(self.pairs)

    @property
    def n_primitives(self) -> int:
        return self.n_keypoints if self.heatmap_mode == "keypoints_only" else self.n_edges

    @property
    def channels(self) -> int:
        return self.n_edges if self.heatmap_mode == "per_edge_channel" else 1

    def weight_param(self) -> Param:
        return self.per_point_weights if self.heatmap_mode == "keypoints_only" else self.raw_weights

    def weights(self) -> np.ndarray:
        """Effective positive weight per primitive (edge, or point in keypoints_only)."""
        return softplus_np(self.weight_param().data)

    def thickness(self) -> np.ndarray:
        if self.raw_thickness is None:
            return np.full(self.n_primitives, self.sigma2, dtype=self.dtype)
        return np.broadcast_to(softplus_np(self.raw_thickness.data), (self.n_primitives,)).copy()

    def weight_matrix(self) -> np.ndarray:
        """Symmetric KxK matrix of effective edge weights, zero diagonal."""
        k = self.n_keypoints
        m = np.zeros((k, k))
        w = softplus_np(self.raw_weights.data.astype(np.float64))
        for e, (i, j) in enumerate(self.pairs):
            m[i, j] = m[j, i] = w[e]
        return m

    def named_params(self, learnable_alpha: bool = True) -> dict[str, Param]:
        out = {}
        if self.heatmap_mode == "keypoints_only":
            out["graph.per_point_weights"] = self.per_point_weights
        else:
            out["graph.raw_weights"] = self.raw_weights
        if learnable_alpha:
            out["graph.alpha"] = self.alpha
        if self.raw_thickness is not None:
            out["graph.raw_thickness"] = self.raw_thickness
        return out


def render_edge_map(kps: Tensor, graph: EdgeGraph, h: int, w: int, mode: str | None = None) -> Tensor:
    """Rasterize the weighted graph over keypoints ``kps`` (B, K, 2).

    Each primitive (segment k_i k_j, or a single point in keypoints_only mode)
    contributes ``weight * exp(-d^2 / sigma2)`` with d the distance of the pixel
    to the primitive. ``max_combined`` and ``keypoints_only`` take the
    per-pixel maximum into one channel; ``per_edge_channel`` keeps one channel
    per edge. Returns (B, C, h, w).

    Gradients reach the keypoints, the raw weights and (learnable modes) the
    raw thickness. The max sends each pixel's gradient to its first maximal
    primitive.
    """
    mode = mode or graph.heatmap_mode
    if mode not in HEATMAP_MODES:
        raise ValueError(f"unknown heatmap mode {mode!r}")
    if h < 2 or w < 2:
        raise ValueError(f"edge map needs h, w >= 2, got {h}x{w}")
    if kps.ndim != 3 or kps.shape[-1] != 2:
        raise ValueError(f"keypoints must be (B, K, 2), got {kps.shape}")
    bsz, k, _ = kps.shape
    if k != graph.n_keypoints:
        raise ValueError(f"graph expects {graph.n_keypoints} keypoints, got {k}")
    if mode != "keypoints_only" and k < 2:
        raise ValueError("edge modes need at least 2 keypoints")

    dtype = kps.dtype
    if mode == "keypoints_only":
        idx_i = idx_j = np.arange(k)
        wparam = graph.per_point_weights
    else:
        idx_i = np.array([p[0] for p in graph.pairs])
        idx_j = np.array([p[1] for p in graph.pairs])
        wparam = graph.raw_weights
    n_prim = len(idx_i)
    weights = softplus_np(wparam.data).astype(dtype)
    thick_param = graph.raw_thickness
    sig2 = np.asarray(graph.thickness(), dtype=dtype)
    if sig2.shape[0] != n_prim:
        raise ValueError(f"thickness has {sig2.shape[0]} entries for {n_prim} primitives; mode mismatch")

    grid = pixel_coords(h, w, dtype)  # (P, 2)
    a = kps.data[:, idx_i, :]  # (B, E, 2)
    b = kps.data[:, idx_j, :]
    e = b - a
    length2 = (e * e).sum(-1)  # (B, E)
    safe_len2 = np.where(length2 > 0, length2, 1.0).astype(dtype)
    rx = grid[None, None, :, 0] - a[..., 0:1]  # (B, E, P)
    ry = grid[None, None, :, 1] - a[..., 1:2]
    tau = (rx * e[..., 0:1] + ry * e[..., 1:2]) / safe_len2[..., None]
    tau[length2 == 0] = 0.0  # a degenerate segment is its first endpoint
    np.clip(tau, 0.0, 1.0, out=tau)
    rx -= tau * e[..., 0:1]
    ry -= tau * e[..., 1:2]
    d2 = rx * rx + ry * ry
    s = np.exp(-d2 / sig2[None, :, None])
    val = weights[None, :, None] * s

    if mode == "per_edge_channel":
        data = val.reshape(bsz, n_prim, h, w)
        sel = None
    else:
        sel = np.argmax(val, axis=1)  # (B, P), first max wins ties
        take = sel[:, None, :]
        data = np.take_along_axis(val, take, 1)[:, 0].reshape(bsz, 1, h, w)
        rx, ry, tau, d2, s = (np.take_along_axis(arr, take, 1)[:, 0] for arr in (rx, ry, tau, d2, s))

    def backward(g):
        if sel is None:
            gv = g.reshape(bsz, n_prim, -1)
            prim = None
        else:
            gv = g.reshape(bsz, -1)
            prim = sel
        wsel = weights[prim] if prim is not None else weights[None, :, None]
        ssel = sig2[prim] if prim is not None else sig2[None, :, None]
        # d(out)/d(d2) = -w s / sigma2 ; d(d2)/d(k_i) = -2 r (1 - tau), d(d2)/d(k_j) = -2 r tau
        coef = gv * wsel * s * (2.0 / ssel)
        if kps.requires_grad:
            gx_i = coef * rx * (1.0 - tau)
            gy_i = coef * ry * (1.0 - tau)
            gx_j = coef * rx * tau
            gy_j = coef * ry * tau
            gk = np.zeros((bsz, k, 2), dtype=np.float64)
            if prim is None:
                sums = np.stack([gx_i.sum(-1), gy_i.sum(-1), gx_j.sum(-1), gy_j.sum(-1)], -1)
                np.add.at(gk, (slice(None), idx_i), sums[..., 0:2])
                np.add.at(gk, (slice(None), idx_j), sums[..., 2:4])
            else:
                rows = (np.arange(bsz)[:, None] * k + idx_i[prim]).ravel()
                rows_j = (np.arange(bsz)[:, None] * k + idx_j[prim]).ravel()
                m = bsz * k
                gk[..., 0] += np.bincount(rows, gx_i.ravel(), m).reshape(bsz, k)
                gk[..., 1] += np.bincount(rows, gy_i.ravel(), m).reshape(bsz, k)
                gk[..., 0] += np.bincount(rows_j, gx_j.ravel(), m).reshape(bsz, k)
                gk[..., 1] += np.bincount(rows_j, gy_j.ravel(), m).reshape(bsz, k)
            _accumulate(kps, gk.astype(dtype))
        sig_w = sigmoid_np(wparam.data)
        gw_prim = gv * s  # d(out)/d(weight)
        g_thick = gv * wsel * s * d2 / (ssel * ssel)  # d(out)/d(sigma2)
        if prim is None:
            gw_e = gw_prim.sum(axis=(0, 2))
            gt_e = g_thick.sum(axis=(0, 2))
        else:
            flat = prim.ravel()
            gw_e = np.bincount(flat, gw_prim.ravel(), n_prim)
            gt_e = np.bincount(flat, g_thick.ravel(), n_prim)
        _accumulate(wparam, (gw_e * sig_w).astype(dtype))
        if thick_param is not None:
            sig_t = sigmoid_np(thick_param.data)
            if thick_param.shape[0] == 1:
                _accumulate(thick_param, (np.array([gt_e.sum()]) * sig_t).astype(dtype))
            else:
                _accumulate(thick_param, (gt_e * sig_t).astype(dtype))

    parents = [kps, wparam]
    if thick_param is not None:
        parents.append(thick_param)
    return _result(np.ascontiguousarray(data, dtype=dtype), parents, backward, "render_edge_map")


@dataclass(frozen=True)
class KeypointSet:
    """Keypoints of one image as plain numbers, (K, 2) in [-1, 1]."""

    coords: np.ndarray

    def to_pixels(self, size: int) -> np.ndarray:
        return (self.coords + 1.0) * 0.5 * (size - 1)
