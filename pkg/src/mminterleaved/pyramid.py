"""Multi-scale image features and the bilinear sampling primitive.

Level ``i`` (1-based) of a pyramid has spatial size ``H / 2**(i+2)``: level 1
comes from an 8x8 strided patch projection, each further level from a learned
2x2 strided reduction of the one above it.

Sampling uses the pixel-center convention with zero padding: a normalized
point ``(u, v)`` maps to continuous coordinates ``x = u*W - 0.5`` (width) and
``y = v*H - 0.5`` (height), and neighbours outside the map contribute zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .numcore import DimensionError, TRAIN_DTYPE, linear, randn

PATCH = 8


@dataclass
class ImagePyramid:
    levels: list[torch.Tensor]  # each (H_i, W_i, C)
    base_hw: tuple[int, int]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    @property
    def channels(self) -> int:
        return self.levels[0].shape[-1]

    def shapes(self) -> list[tuple[int, int]]:
        return [tuple(lv.shape[:2]) for lv in self.levels]


def level_shapes(h: int, w: int, n_levels: int) -> list[tuple[int, int]]:
    div = 2 ** (n_levels + 2)
    if h % div or w % div or h <= 0 or w <= 0:
        raise DimensionError(f"image {h}x{w} is not divisible by 2^(L+2) = {div}")
    return [(h // 2 ** (i + 2), w // 2 ** (i + 2)) for i in range(1, n_levels + 1)]


class PyramidEncoder(nn.Module):
    """Toy stand-in for a ViT + adapter feature extractor."""

    def __init__(self, channels: int, in_ch: int = 1, n_levels: int = 3, rng=None, dtype=TRAIN_DTYPE):
        super().__init__()
        if rng is None:
            raise ValueError("PyramidEncoder needs an rng for initialisation")
        self.channels, self.in_ch, self.n_levels = channels, in_ch, n_levels
        fan = PATCH * PATCH * in_ch
        self.patch_w = nn.Parameter(randn(rng, (channels, fan), fan ** -0.5, dtype))
        self.patch_b = nn.Parameter(torch.zeros(channels, dtype=dtype))
        self.reduce_w = nn.ParameterList(
            nn.Parameter(randn(rng, (channels, 4 * channels), (4 * channels) ** -0.5, dtype))
            for _ in range(n_levels - 1)
        )
        self.reduce_b = nn.ParameterList(
            nn.Parameter(torch.zeros(channels, dtype=dtype)) for _ in range(n_levels - 1)
        )

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        """images (B, H, W, ch) in [0, 1] -> list of (B, H_i, W_i, C)."""
        if images.dim() != 4 or images.shape[-1] != self.in_ch:
            raise DimensionError(f"expected (B, H, W, {self.in_ch}) images, got {tuple(images.shape)}")
        B, H, W, _ = images.shape
        level_shapes(H, W, self.n_levels)
        x = _space_to_depth(images, PATCH)
        levels = [linear(x, self.patch_w, self.patch_b)]
        for w, b in zip(self.reduce_w, self.reduce_b):
            x = _space_to_depth(levels[-1], 2)
            levels.append(torch.nn.functional.gelu(linear(x, w, b)))
        return levels


def _space_to_depth(x: torch.Tensor, p: int) -> torch.Tensor:
    """(B, H, W, C) -> (B, H/p, W/p, p*p*C), patch entries in (row, col, channel) order."""
    B, H, W, C = x.shape
    x = x.reshape(B, H // p, p, W // p, p, C).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(B, H // p, W // p, p * p * C)


def encode_pyramid(img: torch.Tensor, encoder: PyramidEncoder) -> ImagePyramid:
    """Single image (H, W, ch) -> ImagePyramid."""
    if img.dim() != 3:
        raise DimensionError(f"expected (H, W, ch) image, got {tuple(img.shape)}")
    levels = encoder(img[None])
    return ImagePyramid([lv[0] for lv in levels], (img.shape[0], img.shape[1]))


# ---------------------------------------------------------------- sampling


def bilinear_gather(bank: torch.Tensor, img_idx: torch.Tensor, loc: torch.Tensor) -> torch.Tensor:
    """Sample ``bank[img_idx]`` at normalized ``loc``.

    bank: (N, H, W, C); img_idx: integer tensor of shape S; loc: S + (2,) as (u, v).
    Returns S + (C,). Differentiable w.r.t. ``bank`` and ``loc``.
    """
    N, H, W, C = bank.shape
    x = loc[..., 0] * W - 0.5
    y = loc[..., 1] * H - 0.5
    x0f = torch.floor(x.detach())
    y0f = torch.floor(y.detach())
    fx = x - x0f
    fy = y - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    flat = bank.reshape(N * H * W, C)
    out = None
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            rows = (img_idx * H + yi.clamp(0, H - 1)) * W + xi.clamp(0, W - 1)
            wgt = (wx * wy) * inside.to(bank.dtype)
            term = wgt[..., None] * flat[rows]
            out = term if out is None else out + term
    return out


def bilinear_sample(fmap: torch.Tensor, pt) -> torch.Tensor:
    """Sample a single (H, W, C) map at a normalized point (u, v) -> (C,)."""
    pt = torch.as_tensor(pt, dtype=fmap.dtype)
    return bilinear_gather(fmap[None], torch.zeros((), dtype=torch.long), pt)


# ---------------------------------------------------------------- PPM / PGM


def read_pnm(path) -> np.ndarray:
    """Binary PGM (P5) or PPM (P6), 8-bit -> float array (H, W, ch) in [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ValueError(f"{path}: only 8-bit P5/P6 images are supported")
    ch = 3 if magic == b"P6" else 1
    raw = np.frombuffer(data, dtype=np.uint8, count=h * w * ch, offset=pos)
    return raw.reshape(h, w, ch).astype(np.float32) / 255.0


def write_pnm(path, img) -> None:
    """Write (H, W, 1|3) values in [0, 1] as P5/P6."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, ch = arr.shape
    if ch not in (1, 3):
        raise DimensionError("PNM images need 1 or 3 channels")
    q = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
    header = f"{'P5' if ch == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + q.tobytes())
