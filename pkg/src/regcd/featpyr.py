"""Training-free feature pyramid at strides 2 and 4 plus layerwise additive fusion."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, NumericError
from .raster import Raster

PYRAMID_SCALES = (2, 4)


@dataclass(frozen=True)
class FeatureMap:
    """Stack of real-valued responses, ``data`` shaped ``(channels, height, width)``."""

    data: np.ndarray
    scale: int

    def __post_init__(self):
        if self.scale not in (1, 2, 4):
            raise ContractError(f"feature map scale must be 1, 2 or 4, got {self.scale}")
        if self.data.ndim != 3:
            raise ContractError("feature map data must be (channels, height, width)")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class FilterBank:
    kernels: Tuple[np.ndarray, ...]
    tags: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        tags = self.tags or tuple(f"k{i}" for i in range(len(self.kernels)))
        if len(tags) != len(self.kernels):
            raise ConfigError("one tag per kernel required")
        for k, tag in zip(self.kernels, tags):
            if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
                raise ConfigError(f"kernel {tag!r} must be square with odd side, got {k.shape}")
            if tag.startswith("d") and abs(float(k.sum())) > 1e-9:
                raise ConfigError(f"derivative kernel {tag!r} must sum to 0")
        object.__setattr__(self, "tags", tags)

    def __len__(self):
        return len(self.kernels)


def gaussian_bank(sigma: float = 1.5) -> FilterBank:
    """Gaussian smoothing plus first- and second-order Gaussian derivatives.

    Tags starting with ``d`` mark derivative kernels, which are forced to
    sum to exactly zero.
    """
    r = int(math.ceil(3 * sigma))
    ax = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    dg = -ax / sigma ** 2 * g
    ddg = (ax ** 2 / sigma ** 4 - 1 / sigma ** 2) * g
    dg -= dg.mean()
    ddg -= ddg.mean()

    # rows index y, columns index x
    gx = np.outer(g, dg)
    gy = np.outer(dg, g)
    gxx = np.outer(g, ddg)
    gyy = np.outer(ddg, g)
    smooth = np.outer(g, g)
    for k in (gx, gy, gxx, gyy):
        k -= k.mean()
    return FilterBank((gx, gy, gxx, gyy, smooth), ("dx", "dy", "dxx", "dyy", "smooth"))


def downsample2(a: np.ndarray) -> np.ndarray:
    """2x2 box average; odd edges are padded by replication so the size is ``ceil(n / 2)``."""
    h, w = a.shape
    if h % 2 or w % 2:
        a = np.pad(a, ((0, h % 2), (0, w % 2)), mode="edge")
    return 0.25 * (a[0::2, 0::2] + a[1::2, 0::2] + a[0::2, 1::2] + a[1::2, 1::2])


def filter_responses(plane: np.ndarray, bank: FilterBank) -> np.ndarray:
    return np.stack([ndimage.convolve(plane, k, mode="reflect") for k in bank.kernels])


def build_pyramid(img: Raster, bank: FilterBank) -> Tuple[FeatureMap, FeatureMap]:
    """Filter responses at strides 2 and 4 (the Conv1 / Layer1 stand-ins)."""
    if len(bank) == 0:
        raise ConfigError("filter bank is empty")
    level1 = downsample2(img.gray())
    level2 = downsample2(level1)
    return (FeatureMap(filter_responses(level1, bank), 2),
            FeatureMap(filter_responses(level2, bank), 4))


def channel_sum(fm: FeatureMap) -> np.ndarray:
    return fm.data.sum(axis=0)


def fuse_layerwise(fm: FeatureMap) -> Raster:
    """Sum all channels, then min-max rescale to 0..255 (constant sums map to 0)."""
    if fm.channels < 1:
        raise ContractError("feature map has no channels")
    if not np.all(np.isfinite(fm.data)):
        raise NumericError("feature map contains non-finite samples")
    s = channel_sum(fm)
    lo, hi = float(s.min()), float(s.max())
    if hi - lo <= 1e-12 * max(1.0, abs(hi), abs(lo)):
        return Raster(np.zeros(s.shape, dtype=np.uint8))
    return Raster(np.rint((s - lo) * (255.0 / (hi - lo))).astype(np.uint8))


def fused_pyramid(img: Raster, bank: FilterBank) -> List[Raster]:
    """Fused single-channel maps for each pyramid level, ordered by scale."""
    return [fuse_layerwise(fm) for fm in build_pyramid(img, bank)]
