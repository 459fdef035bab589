"""Instance-level contrastive pre-training kernels.

Pure functions only: mask filtering, instance extraction, view augmentation,
the centred temperature-scaled cross-entropy and the EMA centre update. No
network is trained here.
"""

from __future__ import annotations

import json
import subprocess
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.special import log_softmax, softmax

from .errors import ContractError, PluginError
from .raster import Raster, load_raster, save_raster

PORTION_MIN = 0.10
PORTION_MAX = 0.50
CENTER_MOMENTUM = 0.9
ROTATION_PROB = 0.5
JITTER_RANGE = (0.8, 1.2)


@dataclass(frozen=True)
class InstanceMask:
    mask: Raster
    pixel_portion: float = 0.0

    def __post_init__(self):
        if self.mask.channels != 1:
            raise ContractError("instance mask must be single-channel")
        on = int(np.count_nonzero(self.mask.data == 255))
        object.__setattr__(self, "pixel_portion", on / (self.mask.width * self.mask.height))

    @classmethod
    def from_bool(cls, m: np.ndarray) -> "InstanceMask":
        return cls(Raster(np.where(m, 255, 0).astype(np.uint8)))


@dataclass(frozen=True)
class ClusterCenter:
    values: np.ndarray
    momentum: float = CENTER_MOMENTUM

    def __post_init__(self):
        if not 0 < self.momentum < 1:
            raise ContractError(f"momentum must lie in (0, 1), got {self.momentum}")
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).reshape(-1))

    @classmethod
    def zeros(cls, dim: int, momentum: float = CENTER_MOMENTUM) -> "ClusterCenter":
        return cls(np.zeros(dim), momentum)


# --------------------------------------------------------------------------
# Instances
# --------------------------------------------------------------------------

def filter_masks(masks: Sequence[InstanceMask], lo: float = PORTION_MIN,
                 hi: float = PORTION_MAX) -> List[InstanceMask]:
    """Keep masks whose pixel portion lies in ``[lo, hi]`` (both ends inclusive)."""
    return [m for m in masks if lo <= m.pixel_portion <= hi]


def extract_instance(img: Raster, mask: InstanceMask) -> Raster:
    """``img`` where the mask is 255, zero elsewhere."""
    if mask.mask.shape != img.shape:
        raise ContractError(
            f"mask {mask.mask.width}x{mask.mask.height} does not match image {img.width}x{img.height}")
    on = mask.mask.data[:, :, 0] == 255
    return Raster(np.where(on[:, :, None], img.data, 0).astype(np.uint8))


class SegmenterPlugin(Protocol):
    def segment(self, img: Raster) -> List[InstanceMask]:
        """Class-agnostic mask proposals with the same dimensions as ``img``."""
        ...


@dataclass
class BuiltinSegmenter:
    """Adaptive mean threshold followed by 4-connected components.

    A pixel is foreground when it is above both its local mean (``window``
    box, minus ``offset``) and the image mean. The global gate keeps the
    uniform background of an image from surfacing as an instance.
    """

    window: int = 31
    offset: float = 5.0

    def foreground(self, img: Raster) -> np.ndarray:
        g = img.gray()
        local = ndimage.uniform_filter(g, self.window, mode="reflect")
        return (g > local - self.offset) & (g > g.mean())

    def segment(self, img: Raster) -> List[InstanceMask]:
        labels, n = ndimage.label(self.foreground(img))
        return [InstanceMask.from_bool(labels == i) for i in range(1, n + 1)]

    def guide(self, img: Raster) -> Raster:
        """Union of all proposals as a 0/255 mask (cheaper than materialising each)."""
        return Raster(np.where(self.foreground(img), 255, 0).astype(np.uint8))


@dataclass
class SubprocessSegmenter:
    """External segmenter: ``command... image.png out.json``.

    The program writes ``{"masks": [{"id": 0, "png": "mask0.png"}, ...]}`` with
    0/255 mask PNGs given relative to the JSON file.
    """

    command: Sequence[str]
    timeout: Optional[float] = None

    def segment(self, img: Raster) -> List[InstanceMask]:
        with tempfile.TemporaryDirectory(prefix="regcd-seg-") as tmp:
            src, out = Path(tmp, "image.png"), Path(tmp, "masks.json")
            save_raster(img, src)
            try:
                proc = subprocess.run([*self.command, str(src), str(out)], capture_output=True,
                                      text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise PluginError(f"segmenter {self.command[0]!r} failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise PluginError(f"segmenter exited with status {proc.returncode}: {proc.stderr.strip()}")
            try:
                entries = json.loads(out.read_text())["masks"]
                masks = [InstanceMask(load_raster(out.parent / e["png"])) for e in entries]
            except (OSError, ValueError, KeyError, TypeError) as exc:
                raise PluginError(f"segmenter output unreadable: {exc}") from exc
        for m in masks:
            if m.mask.shape != img.shape:
                raise PluginError("segmenter mask dimensions differ from the image")
        return masks

    def guide(self, img: Raster) -> Raster:
        return union_guide(self.segment(img), img)


def union_guide(masks: Sequence[InstanceMask], img: Raster) -> Raster:
    acc = np.zeros(img.shape, dtype=bool)
    for m in masks:
        acc |= m.mask.data[:, :, 0] == 255
    return Raster(np.where(acc, 255, 0).astype(np.uint8))


def segment_guide(segmenter, img: Raster) -> Raster:
    if hasattr(segmenter, "guide"):
        return segmenter.guide(img)
    return union_guide(segmenter.segment(img), img)


def instance_inventory(masks: Sequence[InstanceMask]) -> dict:
    kept = {id(m) for m in filter_masks(masks)}
    return {"masks": [{"id": i, "pixel_portion": m.pixel_portion, "kept": id(m) in kept}
                      for i, m in enumerate(masks)]}


def generate_instances(img: Raster, segmenter: Optional[SegmenterPlugin] = None) -> List[Raster]:
    segmenter = segmenter or BuiltinSegmenter()
    return [extract_instance(img, m) for m in filter_masks(segmenter.segment(img))]


# --------------------------------------------------------------------------
# View augmentation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ViewParams:
    quarter_turns: int  # 0, 1 (90 degrees) or 2 (180 degrees)
    brightness: float
    contrast: float
    saturation: float


def draw_view_params(seed: int, jitter_range: Tuple[float, float] = JITTER_RANGE) -> ViewParams:
    rng = np.random.default_rng(seed)
    turns = int(rng.choice([1, 2])) if rng.random() < ROTATION_PROB else 0
    b, c, s = rng.uniform(jitter_range[0], jitter_range[1], size=3)
    return ViewParams(turns, float(b), float(c), float(s))


def apply_view(img: Raster, p: ViewParams) -> Raster:
    """Rotate counter-clockwise by ``quarter_turns``, then jitter brightness, contrast and saturation."""
    a = np.rot90(img.data, k=p.quarter_turns, axes=(0, 1)).astype(np.float64)
    a = np.clip(a * p.brightness, 0, 255)
    if img.channels == 3:
        mean = (0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2]).mean()
    else:
        mean = a.mean()
    a = np.clip((a - mean) * p.contrast + mean, 0, 255)
    if img.channels == 3:
        g = (0.299 * a[:, :, 0] + 0.587 * a[:, :, 1] + 0.114 * a[:, :, 2])[:, :, None]
        a = np.clip((a - g) * p.saturation + g, 0, 255)
    return Raster(np.rint(a).astype(np.uint8))


def augment_view(img: Raster, rng_seed: int, jitter_range: Tuple[float, float] = JITTER_RANGE) -> Raster:
    return apply_view(img, draw_view_params(rng_seed, jitter_range))


# --------------------------------------------------------------------------
# Loss kernels
# --------------------------------------------------------------------------

def dino_loss_term(x, y, center: ClusterCenter, tau: float) -> float:
    """Cross-entropy between the centred, sharpened teacher ``x`` and student ``y``.

    ``-sum softmax((x - C) / tau) * log_softmax(y / tau)``
    """
    if not tau > 0:
        raise ContractError(f"temperature must be > 0, got {tau}")
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    c = center.values
    if not (len(x) == len(y) == len(c)):
        raise ContractError(f"dimension mismatch: x {len(x)}, y {len(y)}, center {len(c)}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ContractError("embeddings must be finite")
    return float(-np.dot(softmax((x - c) / tau), log_softmax(y / tau)))


def symmetric_pretrain_loss(pt1, pt2, ps1, ps2, center: ClusterCenter, tau: float) -> float:
    return dino_loss_term(pt1, ps2, center, tau) / 2 + dino_loss_term(pt2, ps1, center, tau) / 2


def update_center(center: ClusterCenter, teacher_outputs: Sequence) -> ClusterCenter:
    """``C <- m C + (1 - m) * sum(teacher_outputs)`` (a sum, not a batch mean)."""
    if len(teacher_outputs) == 0:
        raise ContractError("update_center needs at least one teacher output")
    total = np.sum([np.asarray(p, dtype=np.float64).reshape(-1) for p in teacher_outputs], axis=0)
    if total.shape != center.values.shape:
        raise ContractError(f"teacher outputs have dim {total.shape[0]}, center has {center.values.shape[0]}")
    m = center.momentum
    return ClusterCenter(m * center.values + (1 - m) * total, m)
