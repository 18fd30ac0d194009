"""Masked-reconstruction training loop, Adam with parameter groups, checkpoints."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .config import TrainConfig
from .diffgeom import EdgeGraph, render_edge_map, soft_argmax
from .masking import make_mask
from .nets import Decoder, Encoder, FeatureExtractor, reconstruction_loss
from .numcore import NonFiniteError, Param, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DEFAULT_GROUP_MULTS = {"net": 1.0, "edge_weight": 512.0, "alpha": 1.0, "thickness": 1.0}


class TrainingDiverged(RuntimeError):
    """Loss or an intermediate value became non-finite."""


class CheckpointError(RuntimeError):
    """A checkpoint file could not be read back into a model state."""


def _spawn(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class ModelState:
    """Everything that is trained or checkpointed, plus the Adam moments."""

    def __init__(self, config: TrainConfig, dtype=np.float32):
        self.config = config
        self.dtype = np.dtype(dtype)
        enc_rng, dec_rng, feat_rng = _spawn(config.seed, 3)
        self.graph = EdgeGraph(
            config.n_keypoints,
            sigma2=config.sigma2,
            thickness_mode=config.thickness_mode,
            heatmap_mode=config.heatmap_mode,
            dtype=dtype,
        )
        self.encoder = Encoder(config.n_keypoints, config.image_size, enc_rng, dtype)
        self.decoder = Decoder(self.graph.channels, dec_rng, dtype)
        self.extractor = FeatureExtractor(int(feat_rng.integers(2**31)), dtype)
        self.step = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params().items()}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params().items()}

    def params(self) -> dict[str, Param]:
        """Trainable parameters by name, in a fixed order."""
        out = {}
        out.update(self.encoder.params())
        out.update(self.decoder.params())
        out.update(self.graph.named_params(self.config.learnable_alpha))
        return out

    def tensors(self) -> dict[str, Tensor]:
        """Every array a checkpoint must hold."""
        out: dict[str, Tensor] = dict(self.params())
        if "graph.alpha" not in out:
            out["graph.alpha"] = self.graph.alpha
        out.update(self.extractor.tensors())
        return out

    def zero_grad(self) -> None:
        for p in self.params().values():
            p.zero_grad()

    def alpha_tensor(self) -> Tensor:
        return self.graph.alpha if self.config.learnable_alpha else Tensor(self.graph.alpha.data)


def group_multipliers(cfg: TrainConfig) -> dict[str, float]:
    mults = dict(DEFAULT_GROUP_MULTS)
    mults["edge_weight"] = cfg.edge_lr_mult
    return mults


def adam_update(
    param: Param,
    m: np.ndarray,
    v: np.ndarray,
    t: int,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.99),
    eps: float = 1e-8,
    group_mults: dict[str, float] | None = None,
) -> np.ndarray:
    """Bias-corrected Adam step applied in place; returns the applied change.

    The step size is ``lr`` times the multiplier of the parameter's group.
    Moments ``m`` and ``v`` are updated in place and the gradient is zeroed.
    """
    if t < 1:
        raise ValueError(f"Adam step counter must be >= 1, got {t}")
    b1, b2 = betas
    mult = (group_mults or DEFAULT_GROUP_MULTS).get(param.group, 1.0)
    g = param.grad
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    delta = -(lr * mult) * m_hat / (np.sqrt(v_hat) + eps)
    param.data += delta.astype(param.dtype, copy=False)
    param.zero_grad()
    return delta


def step_seed(seed: int, step: int) -> int:
    """Seed for the masks (and batch draw) of one training step."""
    return int(np.random.SeedSequence((seed, step)).generate_state(1)[0])


def masked_batch(images: np.ndarray, cfg: TrainConfig, seed: int) -> np.ndarray:
    """Mask image ``i`` with the grid drawn from ``seed + i``."""
    out = np.empty_like(images)
    for i, img in enumerate(images):
        mask = make_mask(cfg.image_size, cfg.patch_px, cfg.mask_ratio, seed + i)
        out[i] = img * mask.pixel_mask().astype(images.dtype)
    return out


def forward(state: ModelState, images: np.ndarray, masked: np.ndarray) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Run detector, renderer and decoder; returns (loss, recon, keypoints, edge map)."""
    cfg = state.config
    x = Tensor(images.astype(state.dtype, copy=False))
    heat = state.encoder(x)
    kps = soft_argmax(heat)
    edge = render_edge_map(kps, state.graph, cfg.image_size, cfg.image_size)
    recon = state.decoder(Tensor(masked.astype(state.dtype, copy=False)), edge, state.alpha_tensor())
    loss = reconstruction_loss(x, recon, state.extractor, cfg.pixel_loss_weight)
    return loss, recon, kps, edge


def train_step(state: ModelState, images: np.ndarray, cfg: TrainConfig | None = None, seed: int = 0) -> float:
    """One masked-reconstruction update of every trainable group.

    ``images`` is a (B, 3, S, S) float batch in [0, 1]. Raises
    :class:`TrainingDiverged` (naming the step) on any non-finite value.
    """
    cfg = cfg or state.config
    s = cfg.image_size
    if images.ndim != 4 or images.shape[1:] != (3, s, s):
        raise ValueError(f"batch must be (B, 3, {s}, {s}), got {images.shape}")
    images = images.astype(state.dtype, copy=False)
    masked = masked_batch(images, cfg, seed)
    t = state.step + 1
    try:
        with np.errstate(over="ignore", invalid="ignore"):  # non-finite values are checked below
            loss, *_ = forward(state, images, masked)
            if not np.isfinite(loss.data):
                raise NonFiniteError("loss")
            loss.backward()
        params = state.params()
        for name, p in params.items():
            if not np.isfinite(p.grad).all():
                raise NonFiniteError(f"gradient of {name}")
    except NonFiniteError as exc:
        raise TrainingDiverged(f"non-finite value at step {t}: {exc}") from exc
    mults = group_multipliers(cfg)
    for name, p in params.items():
        adam_update(p, state.m[name], state.v[name], t, cfg.lr, (cfg.beta1, cfg.beta2), 1e-8, mults)
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise TrainingDiverged(f"non-finite value at step {t}: parameter {name} after update")
    if not (state.graph.weights() > 0).all():
        raise TrainingDiverged(f"edge weight underflowed to zero at step {t}")
    state.step = t
    return float(loss.data)


def batch_indices(n: int, cfg: TrainConfig, step: int) -> np.ndarray:
    rng = np.random.default_rng(step_seed(cfg.seed, step) ^ 0x5EED)
    return np.sort(rng.choice(n, size=min(cfg.batch, n), replace=False))


@dataclass
class TrainLog:
    steps: list[int]
    losses: list[float]


def fit(
    state: ModelState,
    images_u8: np.ndarray,
    iters: int | None = None,
    log_every: int = 100,
    on_log: Callable[[int, float], None] | None = None,
    on_checkpoint: Callable[[ModelState], None] | None = None,
    ckpt_every: int = 0,
) -> TrainLog:
    """Train on a (N, 3, S, S) uint8 image array until ``iters`` total steps."""
    cfg = state.config
    iters = cfg.iters if iters is None else iters
    log = TrainLog([], [])
    scale = state.dtype.type(1.0 / 255.0)
    while state.step < iters:
        nxt = state.step + 1
        idx = batch_indices(len(images_u8), cfg, nxt)
        batch = images_u8[idx].astype(state.dtype) * scale
        loss = train_step(state, batch, cfg, step_seed(cfg.seed, nxt))
        log.steps.append(state.step)
        log.losses.append(loss)
        if log_every and (state.step % log_every == 0 or state.step == 1):
            if on_log is not None:
                on_log(state.step, loss)
            else:
                logger.info("step=%d loss=%.6g", state.step, loss)
        if on_checkpoint is not None and ckpt_every and state.step % ckpt_every == 0:
            on_checkpoint(state)
    return log


# ---------------------------------------------------------------- checkpoints
def _entries(state: ModelState) -> list[tuple[str, np.ndarray]]:
    items = [(name, t.data) for name, t in state.tensors().items()]
    for name in state.params():
        items.append((f"adam.m.{name}", state.m[name]))
        items.append((f"adam.v.{name}", state.v[name]))
    return items


def save_checkpoint(state: ModelState, path) -> dict:
    """Write a one-line JSON manifest followed by little-endian float32 blobs."""
    tensors, blobs, offset = [], [], 0
    for name, arr in _entries(state):
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "len": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "step": state.step,
        "tensors": tensors,
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n"
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    tmp.replace(path)
    return manifest


def read_manifest(path) -> tuple[dict, int]:
    """Return the manifest and the byte offset where blobs start."""
    with open(path, "rb") as fh:
        line = fh.readline()
    try:
        manifest = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from exc
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise CheckpointError(f"{path}: checkpoint header lacks a tensor table")
    return manifest, len(line)


def load_checkpoint(path, config: TrainConfig | None = None) -> ModelState:
    """Rebuild a :class:`ModelState` bit-exactly from :func:`save_checkpoint` output.

    If ``config`` is given the state is built from it instead of the stored
    config, and every stored tensor must fit that architecture.
    """
    path = Path(path)
    manifest, start = read_manifest(path)
    version = manifest.get("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version!r}, expected {CHECKPOINT_VERSION}")
    cfg = config or TrainConfig.from_dict(manifest["config"])
    state = ModelState(cfg)
    raw = path.read_bytes()[start:]
    table = {t["name"]: t for t in manifest["tensors"]}
    for name, arr in _entries(state):
        entry = table.get(name)
        if entry is None:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(entry["shape"]) != arr.shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {tuple(entry['shape'])}, model expects {arr.shape}")
        lo, n = entry["offset"], entry["len"]
        if n != arr.size * 4 or lo < 0 or lo + n > len(raw):
            raise CheckpointError(f"{path}: tensor {name} blob is truncated or corrupt")
        arr[...] = np.frombuffer(raw, dtype="<f4", count=arr.size, offset=lo).reshape(arr.shape)
    state.step = int(manifest.get("step", 0))
    return state
