"""Random grid-cell masking of input images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Tensor, mul


class ConfigError(ValueError):
    """Invalid combination of configuration values."""


@dataclass(frozen=True)
class GridMask:
    """Which cells of a square image grid are kept.

    ``keep`` has shape (cells_per_side, cells_per_side) and is True for
    visible cells.
    """

    img_size: int
    patch_px: int
    keep: np.ndarray
    seed: int

    @property
    def n_cells(self) -> int:
        return self.keep.size

    @property
    def n_masked(self) -> int:
        return int((~self.keep).sum())

    def pixel_mask(self) -> np.ndarray:
        """(img_size, img_size) array, 1.0 where the pixel is visible."""
        return np.kron(self.keep.astype(np.float64), np.ones((self.patch_px, self.patch_px)))


def make_mask(img_size: int, patch_px: int, ratio: float, seed: int) -> GridMask:
    """Mask exactly ``floor(ratio * cells)`` cells, chosen without replacement."""
    if patch_px < 1 or img_size < 1 or img_size % patch_px:
        raise ConfigError(f"image size {img_size} is not divisible by patch size {patch_px}")
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio must lie in [0, 1], got {ratio}")
    side = img_size // patch_px
    n_cells = side * side
    n_masked = int(np.floor(ratio * n_cells))
    rng = np.random.default_rng(seed)
    hidden = rng.choice(n_cells, size=n_masked, replace=False)
    keep = np.ones(n_cells, dtype=bool)
    keep[hidden] = False
    return GridMask(img_size, patch_px, keep.reshape(side, side), seed)


def apply_mask(img, mask: GridMask):
    """Zero the masked cells of a (..., h, w) image (numpy array or Tensor).

    For tensors the result is a product with a constant 0/1 map, so masked
    pixels receive no gradient.
    """
    h, w = img.shape[-2:]
    if h != mask.img_size or w != mask.img_size:
        raise ValueError(f"mask covers {mask.img_size}x{mask.img_size} pixels, image is {h}x{w}")
    pix = mask.pixel_mask()
    if isinstance(img, Tensor):
        return mul(img, pix.astype(img.dtype))
    return img * pix.astype(img.dtype)
