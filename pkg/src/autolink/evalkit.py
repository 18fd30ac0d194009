"""Landmark regression metrics and spectral clustering of the learned graph."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .diffgeom import EdgeGraph, soft_argmax
from .numcore import Tensor, softplus_np


@dataclass
class RegressionModel:
    """Bias-free linear map from flattened keypoints to flattened landmarks."""

    W: np.ndarray
    ridge: float

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.W


def fit_regressor(x: np.ndarray, y: np.ndarray, ridge: float = 1e-6) -> RegressionModel:
    """Solve (X^T X + ridge I) W = X^T Y for W."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ValueError(f"need X (N, 2K) and Y (N, 2L) with equal N, got {x.shape} and {y.shape}")
    n, d = x.shape
    if n < d:
        raise ValueError(f"underdetermined regression: {n} samples for {d} inputs")
    gram = x.T @ x + ridge * np.eye(d)
    return RegressionModel(np.linalg.solve(gram, x.T @ y), ridge)


def _l2(pred, gt) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    return np.linalg.norm(pred - gt, axis=-1)


def normalized_error(pred, gt, normalizer="image_size", per_landmark: bool = False):
    """Mean L2 landmark error divided by a normalizer.

    ``normalizer`` is ``"image_size"`` (the full [-1, 1] extent, i.e. 2) or a
    pair ``(i, j)`` of landmark indices whose per-sample ground-truth distance
    is used (inter-ocular style).
    """
    err = _l2(pred, gt)  # (N, L)
    if normalizer == "image_size":
        scale = np.full((err.shape[0], 1), 2.0)
    else:
        i, j = normalizer
        gt = np.asarray(gt, dtype=np.float64)
        scale = np.linalg.norm(gt[:, i] - gt[:, j], axis=-1)[:, None]
        if np.any(scale == 0):
            raise ValueError(f"landmarks {i} and {j} coincide in some sample; cannot normalize")
    rel = err / scale
    if per_landmark:
        return rel.mean(axis=0)
    return float(rel.mean())


def pck(pred, gt, d_px: float = 6.0, image_px: int = 256) -> float:
    """Fraction of landmarks within ``d_px`` pixels (inclusive) at ``image_px`` resolution."""
    err_px = _l2(pred, gt) * (image_px / 2.0)
    return float((err_px <= d_px).mean())


def mae_sum(pred, gt, image_px: int = 256) -> float:
    """Per-sample sum of pixel L2 errors at ``image_px``, averaged over samples."""
    err_px = _l2(pred, gt) * (image_px / 2.0)
    return float(err_px.sum(axis=-1).mean())


@dataclass
class EvalReport:
    error_mean: float
    error_per_landmark: list[float]
    pck: float
    mae_sum: float
    n: int
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        expected = {"error_mean", "error_per_landmark", "pck", "mae_sum", "n", "config"}
        if set(d) != expected:
            raise ValueError(f"report keys {sorted(d)} do not match schema {sorted(expected)}")
        return cls(**d)


def evaluate_keypoints(
    train_kps: np.ndarray,
    train_gt: np.ndarray,
    eval_kps: np.ndarray,
    eval_gt: np.ndarray,
    ridge: float = 1e-6,
    pck_px: float = 6.0,
    metric_px: int = 256,
    config: dict | None = None,
) -> EvalReport:
    """Regress landmarks from keypoints on the train split, score the eval split."""
    n_tr = train_gt.shape[0]
    model = fit_regressor(train_kps.reshape(n_tr, -1), train_gt.reshape(n_tr, -1), ridge)
    pred = model.predict(eval_kps.reshape(eval_kps.shape[0], -1)).reshape(eval_gt.shape)
    per = normalized_error(pred, eval_gt, per_landmark=True)
    return EvalReport(
        error_mean=float(normalized_error(pred, eval_gt)),
        error_per_landmark=[float(v) for v in per],
        pck=pck(pred, eval_gt, pck_px, metric_px),
        mae_sum=mae_sum(pred, eval_gt, metric_px),
        n=int(eval_gt.shape[0]),
        config=dict(config or {}),
    )


def detect_keypoints(state, images_u8: np.ndarray, chunk: int = 100) -> np.ndarray:
    """Run the detector over (N, 3, S, S) uint8 images; returns (N, K, 2)."""
    out = []
    scale = state.dtype.type(1.0 / 255.0)
    for lo in range(0, len(images_u8), chunk):
        x = Tensor(images_u8[lo : lo + chunk].astype(state.dtype) * scale)
        out.append(soft_argmax(state.encoder(x)).data.astype(np.float64))
    k = state.config.n_keypoints
    return np.concatenate(out) if out else np.zeros((0, k, 2))


def evaluate(state, train_ds, eval_ds) -> EvalReport:
    """Detector keypoints -> bias-free regression on train -> metrics on eval."""
    size = state.config.image_size
    for ds in (train_ds, eval_ds):
        if ds.count and ds.image_size != size:
            raise ValueError(f"model expects {size}px images, dataset {ds.root} holds {ds.image_size}px")
    cfg = state.config.to_dict()
    cfg["step"] = state.step
    return evaluate_keypoints(
        detect_keypoints(state, train_ds.images),
        train_ds.joints,
        detect_keypoints(state, eval_ds.images),
        eval_ds.joints,
        config=cfg,
    )


# ------------------------------------------------------------------ clustering
def affinity_matrix(graph: EdgeGraph) -> np.ndarray:
    k = graph.n_keypoints
    a = np.zeros((k, k))
    w = softplus_np(graph.raw_weights.data.astype(np.float64))
    for e, (i, j) in enumerate(graph.pairs):
        a[i, j] = a[j, i] = w[e]
    return a


def normalized_laplacian(a: np.ndarray) -> np.ndarray:
    """I - D^-1/2 A D^-1/2; isolated vertices get a zero row so they form
    their own zero-eigenvalue component."""
    deg = a.sum(axis=1)
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    lap = np.eye(len(a)) - inv[:, None] * a * inv[None, :]
    lap[~nz, ~nz] = 0.0
    return lap


def kmeans(x: np.ndarray, k: int, restarts: int = 10, seed: int = 0, max_iter: int = 100):
    """Lloyd's algorithm from ``restarts`` seeded k-means++ starts; best inertia wins.

    An emptied cluster is re-seeded at the point farthest from its centroid.
    Returns (labels, inertia).
    """
    n = len(x)
    if k > n:
        raise ValueError(f"cannot form {k} clusters from {n} points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        centers = [x[rng.integers(n)]]
        for _ in range(1, k):
            d2 = np.min([((x - c) ** 2).sum(1) for c in centers], axis=0)
            total = d2.sum()
            pick = rng.choice(n, p=d2 / total) if total > 0 else rng.integers(n)
            centers.append(x[pick])
        centers = np.array(centers, dtype=np.float64)
        labels = np.full(n, -1)
        for _ in range(max_iter):
            dist = ((x[:, None, :] - centers[None]) ** 2).sum(-1)
            new = dist.argmin(axis=1)
            for c in range(k):
                if not np.any(new == c):
                    far = int(dist[np.arange(n), new].argmax())
                    new[far] = c
            if np.array_equal(new, labels):
                break
            labels = new
            centers = np.array([x[labels == c].mean(axis=0) for c in range(k)])
        inertia = float(((x - centers[labels]) ** 2).sum())
        if best is None or inertia < best[1] - 1e-12:
            best = (labels.copy(), inertia)
    return best


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters by first appearance, so keypoint 0 is in cluster 0."""
    mapping: dict[int, int] = {}
    for lab in labels:
        mapping.setdefault(int(lab), len(mapping))
    return np.array([mapping[int(lab)] for lab in labels])


def spectral_cluster(graph_or_affinity, k: int = 2, restarts: int = 10, seed: int = 0) -> np.ndarray:
    """Normalized-Laplacian spectral clustering (row-normalized embedding).

    Accepts an :class:`EdgeGraph` (affinity = softplus edge weights) or a
    symmetric non-negative affinity matrix.
    """
    if isinstance(graph_or_affinity, EdgeGraph):
        a = affinity_matrix(graph_or_affinity)
    else:
        a = np.array(graph_or_affinity, dtype=np.float64)
        np.fill_diagonal(a, 0.0)
    n = len(a)
    if k < 1 or k > n:
        raise ValueError(f"cannot split {n} keypoints into {k} clusters")
    if not np.allclose(a, a.T) or np.any(a < 0):
        raise ValueError("affinity must be symmetric and non-negative")
    vals, vecs = np.linalg.eigh(normalized_laplacian(a))
    emb = vecs[:, np.argsort(vals, kind="stable")[:k]]
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    emb = np.where(norms > 0, emb / np.where(norms > 0, norms, 1.0), 0.0)
    labels, _ = kmeans(emb, k, restarts=restarts, seed=seed)
    return canonical_labels(labels)


def normalized_cut(a: np.ndarray, labels: np.ndarray) -> float:
    """Sum over clusters of cut(C, rest) / vol(C)."""
    a = np.asarray(a, dtype=np.float64)
    total = 0.0
    for c in np.unique(labels):
        inside = labels == c
        vol = a[inside].sum()
        cut = a[np.ix_(inside, ~inside)].sum()
        total += cut / vol if vol > 0 else 0.0
    return total
