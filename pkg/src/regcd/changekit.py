"""Tiled change detection on a registered pair, overlap masking and the weighted BCE loss."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Protocol

import numpy as np
from scipy import ndimage

from .errors import ContractError
from .pretrainkit import BuiltinSegmenter, segment_guide
from .raster import DEFAULT_TILE_SIZE, Raster, assemble, partition

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.5
DEFAULT_OMEGA = 2.0
BCE_CLAMP = 1e-7


@dataclass(frozen=True, eq=False)
class ChangeMap:
    """Change probabilities in T1 coordinates and their thresholded 0/255 map."""

    probs: np.ndarray
    binary: Raster
    threshold: float = DEFAULT_THRESHOLD

    @classmethod
    def from_probs(cls, probs: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> "ChangeMap":
        probs = np.clip(np.asarray(probs, dtype=np.float64), 0.0, 1.0)
        probs.flags.writeable = False
        return cls(probs, Raster(np.where(probs >= threshold, 255, 0).astype(np.uint8)), threshold)

    def probs_raster(self) -> Raster:
        return Raster(np.rint(self.probs * 255).astype(np.uint8))


class ClassifierPlugin(Protocol):
    def score(self, tile1: Raster, tile2: Raster, guide1: Raster, guide2: Raster) -> np.ndarray:
        """Per-pixel change probability in ``[0, 1]`` with the tiles' shape."""
        ...


def _normalise(plane: np.ndarray) -> np.ndarray:
    std = plane.std()
    return (plane - plane.mean()) / std if std > 1e-6 else np.zeros_like(plane)


@dataclass
class BaselineClassifier:
    """Training-free scorer: normalised difference gated by structure guides.

    Each tile is standardised by its own mean and std, the absolute
    difference is smoothed and mapped linearly from ``[low, high]`` (in std
    units) onto ``[0, 1]``. The result is then multiplied by
    ``alpha + (1 - alpha) * max(guide1, guide2) / 255``.
    """

    sigma: float = 2.0
    alpha: float = 0.3
    low: float = 0.25
    high: float = 1.25

    def raw_score(self, tile1: Raster, tile2: Raster) -> np.ndarray:
        diff = np.abs(_normalise(tile1.gray()) - _normalise(tile2.gray()))
        smooth = ndimage.gaussian_filter(diff, self.sigma, mode="reflect")
        return np.clip((smooth - self.low) / (self.high - self.low), 0.0, 1.0)

    def score(self, tile1: Raster, tile2: Raster, guide1: Raster, guide2: Raster) -> np.ndarray:
        if not (tile1.shape == tile2.shape == guide1.shape == guide2.shape):
            raise ContractError("tiles and guides must share dimensions")
        g = np.maximum(guide1.gray(), guide2.gray()) / 255.0
        return self.raw_score(tile1, tile2) * (self.alpha + (1 - self.alpha) * g)


def baseline_score(tile1: Raster, tile2: Raster, guide1: Raster, guide2: Raster) -> np.ndarray:
    return BaselineClassifier().score(tile1, tile2, guide1, guide2)


def detect_changes(t1: Raster, t2_registered: Raster, validity: Raster,
                   plugin: Optional[ClassifierPlugin] = None, segmenter=None,
                   tile_size: int = DEFAULT_TILE_SIZE, threshold: float = DEFAULT_THRESHOLD,
                   workers: int = 1) -> ChangeMap:
    """Score every tile pair, stitch the probabilities and zero invalid pixels.

    T1 is blanked wherever ``validity`` is 0 so both epochs carry the same fill
    before tiling. Guides are computed per tile from each epoch's own tile.
    """
    if t1.shape != t2_registered.shape or validity.shape != t1.shape:
        raise ContractError(
            f"dimension mismatch: t1 {t1.width}x{t1.height}, t2 {t2_registered.width}x{t2_registered.height}, "
            f"validity {validity.width}x{validity.height}")
    if not 0 < threshold < 1:
        raise ContractError(f"threshold must lie in (0, 1), got {threshold}")
    plugin = plugin or BaselineClassifier()
    segmenter = segmenter or BuiltinSegmenter()

    valid = validity.data[:, :, 0] > 0
    t1_masked = Raster(np.where(valid[:, :, None], t1.data, 0).astype(np.uint8))
    tiles1, layout = partition(t1_masked, tile_size)
    tiles2, _ = partition(t2_registered, tile_size)

    def run(pair):
        a, b = pair
        g1, g2 = segment_guide(segmenter, a.payload), segment_guide(segmenter, b.payload)
        p = np.asarray(plugin.score(a.payload, b.payload, g1, g2), dtype=np.float64)
        if p.shape != a.payload.shape or not np.all(np.isfinite(p)):
            raise ContractError(f"classifier returned invalid scores for tile ({a.origin_x},{a.origin_y})")
        return a.origin_x, a.origin_y, np.clip(p, 0.0, 1.0)

    pairs = list(zip(tiles1, tiles2))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            scored = list(ex.map(run, pairs))
    else:
        scored = [run(p) for p in pairs]

    probs = assemble(scored, layout)
    probs[~valid] = 0.0
    if not valid.any():
        log.warning("validity mask is empty; change map will be all zero")
    return ChangeMap.from_probs(probs, threshold)


def apply_overlap_mask(m_init: ChangeMap, mask_ob: Raster) -> ChangeMap:
    """Element-wise product of both maps with ``mask_ob / 255``."""
    if mask_ob.shape != m_init.binary.shape:
        raise ContractError(
            f"overlap mask {mask_ob.width}x{mask_ob.height} does not match change map "
            f"{m_init.binary.width}x{m_init.binary.height}")
    w = mask_ob.gray() / 255.0
    probs = m_init.probs * w
    probs.flags.writeable = False
    binary = np.rint(m_init.binary.gray() * w).astype(np.uint8)
    return ChangeMap(probs, Raster(binary), m_init.threshold)


def weighted_bce(pred, target, omega: float = DEFAULT_OMEGA) -> float:
    """Mean of ``-[omega * t * log(p) + (1 - t) * log(1 - p)]`` with ``p`` clamped away from 0 and 1."""
    if not omega > 0:
        raise ContractError(f"omega must be > 0, got {omega}")
    p = np.clip(np.asarray(pred, dtype=np.float64), BCE_CLAMP, 1 - BCE_CLAMP)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ContractError(f"pred shape {p.shape} differs from target shape {t.shape}")
    return float(np.mean(-(omega * t * np.log(p) + (1 - t) * np.log(1 - p))))
