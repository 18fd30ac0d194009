"""Procedural stick-figure images with ground-truth joints.

A figure is a small kinematic tree rooted at the pelvis::

    pelvis -> neck -> head
    neck   -> left hand, right hand
    pelvis -> left foot, right foot

Angles are measured clockwise from "up" in image coordinates (y grows
downwards), so a bone at angle a points along (sin a, -cos a). Each bone's
angle is its parent's angle plus a rest offset plus a sampled deviation.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

JOINT_NAMES = ("head", "neck", "pelvis", "left_hand", "right_hand", "left_foot", "right_foot")
# (child, parent, rest offset in degrees relative to the parent bone direction)
BONES = (
    ("neck", "pelvis", 0.0),
    ("head", "neck", 0.0),
    ("left_hand", "neck", 110.0),
    ("right_hand", "neck", -110.0),
    ("left_foot", "pelvis", 155.0),
    ("right_foot", "pelvis", -155.0),
)
EVAL_SEED_OFFSET = 1_000_000
MANIFEST = "annotations.json"


class DatasetError(RuntimeError):
    """A dataset directory is missing files or holds malformed content."""


@dataclass(frozen=True)
class FigureSpec:
    image_size: int = 64
    bone_length: tuple[float, float] = (0.25, 0.45)
    root_range: float = 0.3
    angle_range_deg: float = 75.0
    joint_margin: float = 0.9
    thickness_px: float = 3.0
    noise_sigma: float = 0.02


@dataclass
class StickFigureSample:
    image: np.ndarray  # (3, S, S) float64 in [0, 1]
    joints: np.ndarray  # (7, 2) normalized (x, y)
    pose_params: dict = field(default_factory=dict)
    appearance_params: dict = field(default_factory=dict)
    seed: int = 0


def forward_kinematics(root: np.ndarray, root_rotation: float, angles, lengths) -> np.ndarray:
    """Joint positions (7, 2) from pose parameters; angles in radians, per bone."""
    pos = {"pelvis": np.asarray(root, dtype=np.float64)}
    heading = {"pelvis": root_rotation}
    for (child, parent, rest), dev, length in zip(BONES, angles, lengths):
        a = heading[parent] + np.deg2rad(rest) + dev
        heading[child] = a
        pos[child] = pos[parent] + length * np.array([np.sin(a), -np.cos(a)])
    return np.stack([pos[name] for name in JOINT_NAMES])


def _sample_pose(rng: np.random.Generator, spec: FigureSpec) -> dict:
    span = np.deg2rad(spec.angle_range_deg)
    while True:
        root = rng.uniform(-spec.root_range, spec.root_range, size=2)
        rot = rng.uniform(-np.pi, np.pi)
        angles = rng.uniform(-span, span, size=len(BONES))
        lengths = rng.uniform(*spec.bone_length, size=len(BONES))
        joints = forward_kinematics(root, rot, angles, lengths)
        if np.all(np.abs(joints) <= spec.joint_margin):
            return {"root": root, "root_rotation": rot, "angles": angles, "lengths": lengths, "joints": joints}


def _background(rng: np.random.Generator, size: int) -> tuple[np.ndarray, dict]:
    if rng.random() < 0.5:
        color = rng.uniform(0.0, 0.45, size=3)
        img = np.broadcast_to(color[:, None, None], (3, size, size)).copy()
        return img, {"background": "flat", "colors": [color.tolist()]}
    c0, c1 = rng.uniform(0.0, 0.45, size=(2, 3))
    theta = rng.uniform(-np.pi, np.pi)
    coord = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(coord, coord)
    ramp = (np.cos(theta) * xx + np.sin(theta) * yy) / np.sqrt(2.0) * 0.5 + 0.5
    img = c0[:, None, None] * (1.0 - ramp) + c1[:, None, None] * ramp
    return img, {"background": "gradient", "colors": [c0.tolist(), c1.tolist()], "angle": theta}


def _segment_dist_px(px: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    e = b - a
    t = np.clip(((px - a) @ e) / max(e @ e, 1e-12), 0.0, 1.0)
    return np.linalg.norm(px - (a + t[:, None] * e), axis=1)


def generate_sample(seed: int, spec: FigureSpec = FigureSpec()) -> StickFigureSample:
    rng = np.random.default_rng(seed)
    pose = _sample_pose(rng, spec)
    size = spec.image_size
    img, appearance = _background(rng, size)
    bone_color = rng.uniform(0.75, 1.0, size=3)
    appearance["bone_color"] = bone_color.tolist()

    joints = pose["joints"]
    pix = (joints + 1.0) * 0.5 * (size - 1)
    yy, xx = np.mgrid[0:size, 0:size]
    grid = np.stack([xx.ravel(), yy.ravel()], axis=1).astype(np.float64)
    index = {name: i for i, name in enumerate(JOINT_NAMES)}
    cover = np.zeros(size * size)
    half = spec.thickness_px / 2.0
    for child, parent, _ in BONES:
        d = _segment_dist_px(grid, pix[index[parent]], pix[index[child]])
        # full coverage inside the stroke, one-pixel linear falloff at the rim
        cover = np.maximum(cover, np.clip(half + 0.5 - d, 0.0, 1.0))
    cover = cover.reshape(size, size)
    img = img * (1.0 - cover) + bone_color[:, None, None] * cover
    img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    pose_params = {k: np.asarray(v).tolist() for k, v in pose.items() if k != "joints"}
    return StickFigureSample(img, joints, pose_params, appearance, seed)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """(3, S, S) floats in [0, 1] -> (S, S, 3) bytes."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_png(path: Path, img: np.ndarray) -> None:
    try:
        Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc


def read_png(path: Path) -> np.ndarray:
    """Load an 8-bit RGB PNG as a (3, S, S) uint8 array."""
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


@dataclass
class Dataset:
    """One split of a stick-figure collection, loaded eagerly."""

    root: Path
    split: str
    files: list[str]
    joints: np.ndarray  # (N, 7, 2)
    images: np.ndarray  # (N, 3, S, S) uint8

    @property
    def count(self) -> int:
        return len(self.files)

    @property
    def image_size(self) -> int:
        return int(self.images.shape[-1])

    def float_images(self, idx=None, dtype=np.float32) -> np.ndarray:
        arr = self.images if idx is None else self.images[idx]
        return arr.astype(dtype) / dtype(255.0)

    def __len__(self) -> int:
        return self.count


def _write_split(split_dir: Path, seeds, spec: FigureSpec) -> list[dict]:
    img_dir = split_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    for i, seed in enumerate(seeds):
        sample = generate_sample(int(seed), spec)
        name = f"images/{i:06d}.png"
        write_png(split_dir / name, sample.image)
        manifest.append({"file": name, "joints": sample.joints.tolist()})
    path = split_dir / MANIFEST
    try:
        path.write_text(json.dumps(manifest), encoding="utf-8")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return manifest


def generate_dataset(
    root, n_train: int, n_eval: int, base_seed: int = 0, spec: FigureSpec = FigureSpec()
) -> dict[str, Dataset]:
    """Write ``<root>/train`` and ``<root>/eval`` splits and load them back.

    Training sample i uses seed ``base_seed + i``; evaluation seeds are
    shifted by 1,000,000 so the splits never share a figure.
    """
    if n_train < 0 or n_eval < 0:
        raise ValueError("sample counts must be non-negative")
    root = Path(root)
    for split, n, offset in (("train", n_train, 0), ("eval", n_eval, EVAL_SEED_OFFSET)):
        seeds = base_seed + offset + np.arange(n)
        _write_split(root / split, seeds, spec)
        logger.info("wrote %d %s samples to %s", n, split, root / split)
    return {split: load_dataset(root / split) for split in ("train", "eval")}


def load_dataset(root) -> Dataset:
    """Load one split directory holding ``annotations.json`` and ``images/``."""
    root = Path(root)
    path = root / MANIFEST
    if not path.is_file():
        raise DatasetError(f"missing manifest {path}")
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(entries, list):
        raise DatasetError(f"malformed manifest {path}: expected a JSON array")
    files, joints, images = [], [], []
    for n, entry in enumerate(entries):
        if not isinstance(entry, dict) or "file" not in entry or "joints" not in entry:
            raise DatasetError(f"malformed manifest {path}: entry {n} lacks 'file'/'joints'")
        arr = np.asarray(entry["joints"], dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise DatasetError(f"malformed manifest {path}: entry {n} joints have shape {arr.shape}")
        img_path = root / entry["file"]
        if not img_path.is_file():
            raise DatasetError(f"manifest {path} references missing file {img_path}")
        files.append(entry["file"])
        joints.append(arr)
        images.append(read_png(img_path))
    if images and len({im.shape for im in images}) > 1:
        raise DatasetError(f"images under {root} have inconsistent sizes")
    split = root.name if root.name in ("train", "eval") else os.fspath(root.name)
    return Dataset(
        root=root,
        split=split,
        files=files,
        joints=np.stack(joints) if joints else np.zeros((0, len(JOINT_NAMES), 2)),
        images=np.stack(images) if images else np.zeros((0, 3, 0, 0), dtype=np.uint8),
    )
