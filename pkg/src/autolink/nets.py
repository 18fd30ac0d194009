"""Small convolutional networks: keypoint detector, decoder, frozen features."""

from __future__ import annotations

import numpy as np

from .numcore import (
    Param,
    Tensor,
    add,
    concat_channels,
    conv2d,
    leaky_relu,
    mean,
    mul,
    resize_bilinear,
    square,
    sub,
)

SLOPE = 0.2


def _he_normal(rng: np.random.Generator, shape, dtype) -> np.ndarray:
    fan_in = shape[1] * shape[2] * shape[3]
    std = np.sqrt(2.0 / ((1.0 + SLOPE**2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


class ConvLayer:
    """3x3 (or 1x1) convolution with bias; weights He-initialized."""

    def __init__(self, rng, c_in: int, c_out: int, k: int = 3, stride: int = 1, dtype=np.float32, frozen=False):
        w = _he_normal(rng, (c_out, c_in, k, k), dtype)
        b = np.zeros(c_out, dtype=dtype)
        if frozen:
            self.w, self.b = Tensor(w), Tensor(b)
        else:
            self.w, self.b = Param(w), Param(b)
        self.stride = stride
        self.pad = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.stride, self.pad, bias=self.b)

    def tensors(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


def _up(x: Tensor) -> Tensor:
    return resize_bilinear(x, x.shape[-2] * 2, x.shape[-1] * 2)


class Encoder:
    """Residual downsampling trunk plus a bilinear upsampling head.

    3x64x64 images become K heatmaps at a quarter of the input resolution.
    """

    def __init__(self, n_keypoints: int, image_size: int = 64, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_size = image_size
        self.n_keypoints = n_keypoints
        chans = (3, 32, 64, 128, 128)
        self.down = [ConvLayer(rng, chans[i], chans[i + 1], stride=2, dtype=dtype) for i in range(4)]
        self.up = [ConvLayer(rng, 128, 64, dtype=dtype), ConvLayer(rng, 64, 32, dtype=dtype)]
        self.head = ConvLayer(rng, 32, n_keypoints, k=1, dtype=dtype)

    def __call__(self, img: Tensor) -> Tensor:
        s = self.image_size
        if img.ndim != 4 or img.shape[1:] != (3, s, s):
            raise ValueError(f"encoder expects (B, 3, {s}, {s}) images, got {img.shape}")
        h = img
        for layer in self.down:
            y = leaky_relu(layer(h), SLOPE)
            if y.shape[1] == h.shape[1]:
                y = add(y, resize_bilinear(h, *y.shape[-2:]))
            h = y
        for layer, size in zip(self.up, (s // 8, s // 4)):
            h = leaky_relu(layer(resize_bilinear(h, size, size)), SLOPE)
        return self.head(h)

    def params(self) -> dict[str, Param]:
        out = {}
        for i, layer in enumerate(self.down):
            out.update(layer.tensors(f"encoder.down{i}"))
        for i, layer in enumerate(self.up):
            out.update(layer.tensors(f"encoder.up{i}"))
        out.update(self.head.tensors("encoder.head"))
        return out


class Decoder:
    """Three-level hourglass with concatenated skips.

    The input is the alpha-scaled masked image joined with the edge map;
    the full-resolution input is also fed to the last layer so visible pixels
    can be copied through.
    """

    def __init__(self, edge_channels: int = 1, rng=None, dtype=np.float32):
        rng = rng if rng is not None else np.random.default_rng(1)
        self.edge_channels = edge_channels
        c_in = 3 + edge_channels
        self.d1 = ConvLayer(rng, c_in, 32, stride=2, dtype=dtype)
        self.d2 = ConvLayer(rng, 32, 64, stride=2, dtype=dtype)
        self.d3 = ConvLayer(rng, 64, 128, stride=2, dtype=dtype)
        self.u2 = ConvLayer(rng, 128 + 64, 32, dtype=dtype)
        self.u1 = ConvLayer(rng, 32 + 32, 16, dtype=dtype)
        self.out = ConvLayer(rng, 16 + c_in, 3, dtype=dtype)

    def __call__(self, masked: Tensor, edge_map: Tensor, alpha: Tensor) -> Tensor:
        if edge_map.shape[1] != self.edge_channels:
            raise ValueError(
                f"decoder was built for {self.edge_channels} edge channel(s), got {edge_map.shape[1]}"
            )
        if masked.shape[1] != 3 or masked.shape[-2:] != edge_map.shape[-2:] or masked.shape[0] != edge_map.shape[0]:
            raise ValueError(f"masked image {masked.shape} does not match edge map {edge_map.shape}")
        x = concat_channels(mul(masked, alpha), edge_map)
        e1 = leaky_relu(self.d1(x), SLOPE)
        e2 = leaky_relu(self.d2(e1), SLOPE)
        e3 = leaky_relu(self.d3(e2), SLOPE)
        h = leaky_relu(self.u2(concat_channels(_up(e3), e2)), SLOPE)
        h = leaky_relu(self.u1(concat_channels(_up(h), e1)), SLOPE)
        return self.out(concat_channels(_up(h), x))

    def params(self) -> dict[str, Param]:
        out = {}
        for name in ("d1", "d2", "d3", "u2", "u1", "out"):
            out.update(getattr(self, name).tensors(f"decoder.{name}"))
        return out


class FeatureExtractor:
    """Frozen random convolutional pyramid (features at strides 2, 4, 8)."""

    def __init__(self, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        chans = (3, 16, 32, 64)
        self.stages = [ConvLayer(rng, chans[i], chans[i + 1], stride=2, dtype=dtype, frozen=True) for i in range(3)]

    def __call__(self, img: Tensor) -> list[Tensor]:
        feats = []
        h = img
        for stage in self.stages:
            h = leaky_relu(stage(h), SLOPE)
            feats.append(h)
        return feats

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, stage in enumerate(self.stages):
            out.update(stage.tensors(f"extractor.stage{i}"))
        return out


def encode(encoder: Encoder, img: Tensor) -> Tensor:
    return encoder(img)


def decode(decoder: Decoder, masked: Tensor, edge_map: Tensor, alpha: Tensor) -> Tensor:
    return decoder(masked, edge_map, alpha)


def extract_features(extractor: FeatureExtractor, img: Tensor) -> list[Tensor]:
    return extractor(img)


def reconstruction_loss(
    target: Tensor, recon: Tensor, extractor: FeatureExtractor, pixel_weight: float = 0.1
) -> Tensor:
    """Summed per-level feature MSE plus ``pixel_weight`` times the pixel MSE.

    Every term is a mean over the batch and the per-sample elements, so the
    value does not change when the batch is duplicated.
    """
    if target.shape != recon.shape:
        raise ValueError(f"target {target.shape} and reconstruction {recon.shape} differ in shape")
    ref = extractor(Tensor(target.data))
    out = extractor(recon)
    loss = None
    for fr, fo in zip(ref, out):
        term = mean(square(sub(fo, Tensor(fr.data))))
        loss = term if loss is None else add(loss, term)
    if pixel_weight:
        loss = add(loss, mul(mean(square(sub(recon, Tensor(target.data)))), pixel_weight))
    return loss
