"""Pixel metrics, synthetic distortion scenarios and registration accuracy."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from PIL import Image, ImageDraw
from scipy import ndimage

from .errors import ContractError
from .geomest import Homography, project
from .raster import Raster, load_raster, save_raster, warp_raster

# level -> (max |rotation| in degrees, max |shift| as a fraction of the image size)
LEVEL_BOUNDS = {1: (10.0, 0.07), 2: (20.0, 0.13), 3: (30.0, 0.20)}

ROTATION_ORDER = "rotate-about-centre-then-shift"


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class Metrics:
    precision: float
    recall: float
    f1: float
    iou: float
    oa: float


def _binary(r: Raster, name: str) -> np.ndarray:
    if r.channels != 1:
        raise ContractError(f"{name} must be single-channel")
    return r.data[:, :, 0] == 255


def confusion(pred: Raster, gt: Raster, eval_mask: Optional[Raster] = None) -> ConfusionCounts:
    """Pixel confusion counts with 255 as the positive class.

    Only pixels where ``eval_mask == 255`` are counted when a mask is given.
    """
    if pred.shape != gt.shape or (eval_mask is not None and eval_mask.shape != gt.shape):
        raise ContractError(
            f"dimension mismatch: pred {pred.width}x{pred.height}, gt {gt.width}x{gt.height}"
            + ("" if eval_mask is None else f", mask {eval_mask.width}x{eval_mask.height}"))
    p, g = _binary(pred, "pred"), _binary(gt, "gt")
    if eval_mask is not None:
        sel = _binary(eval_mask, "mask")
        p, g = p[sel], g[sel]
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = int(p.size - tp - fp - fn)
    return ConfusionCounts(tp, fp, fn, tn)


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def metrics(c: ConfusionCounts) -> Metrics:
    """Precision, recall, F1, IoU and OA; any 0/0 is reported as 0."""
    precision = _ratio(c.tp, c.tp + c.fp)
    recall = _ratio(c.tp, c.tp + c.fn)
    # same value as 2PR / (P + R), but with a single rounding
    f1 = _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)
    iou = _ratio(c.tp, c.tp + c.fn + c.fp)
    oa = _ratio(c.tp + c.tn, c.total)
    return Metrics(precision, recall, f1, iou, oa)


def metrics_report(c: ConfusionCounts) -> dict:
    return {**asdict(metrics(c)), "confusion": asdict(c)}


# --------------------------------------------------------------------------
# Distortion scenarios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DistortionSpec:
    level: int
    rotation_deg: float
    shift_frac: Tuple[float, float]
    seed: int = 0

    def validate(self) -> None:
        if self.level not in LEVEL_BOUNDS:
            raise ContractError(f"distortion level must be 1, 2 or 3, got {self.level}")
        max_rot, max_shift = LEVEL_BOUNDS[self.level]
        if abs(self.rotation_deg) > max_rot:
            raise ContractError(f"rotation {self.rotation_deg} exceeds level {self.level} bound {max_rot}")
        for s in self.shift_frac:
            if abs(s) > max_shift:
                raise ContractError(f"shift {s} exceeds level {self.level} bound {max_shift}")

    def to_json(self) -> dict:
        return {"level": self.level, "rotation_deg": self.rotation_deg,
                "shift_frac": list(self.shift_frac), "seed": self.seed, "order": ROTATION_ORDER}

    @classmethod
    def from_json(cls, obj: dict) -> "DistortionSpec":
        return cls(int(obj["level"]), float(obj["rotation_deg"]),
                   (float(obj["shift_frac"][0]), float(obj["shift_frac"][1])), int(obj.get("seed", 0)))


def draw_distortion(level: int, seed: int) -> DistortionSpec:
    """Uniform draw of rotation and per-axis shift within the level's bounds."""
    if level not in LEVEL_BOUNDS:
        raise ContractError(f"distortion level must be 1, 2 or 3, got {level}")
    max_rot, max_shift = LEVEL_BOUNDS[level]
    rng = np.random.default_rng(seed)
    rot = float(rng.uniform(-max_rot, max_rot))
    dx, dy = (float(v) for v in rng.uniform(-max_shift, max_shift, size=2))
    return DistortionSpec(level, rot, (dx, dy), seed)


def distortion_homography(spec: DistortionSpec, width: int, height: int) -> Homography:
    """Map from distorted-T2 pixels to T1 pixels: rotate about the centre, then shift."""
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    t = math.radians(spec.rotation_deg)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s, cx - c * cx + s * cy],
                    [s, c, cy - s * cx - c * cy],
                    [0, 0, 1.0]])
    shift = np.array([[1, 0, spec.shift_frac[0] * width],
                      [0, 1, spec.shift_frac[1] * height],
                      [0, 0, 1.0]])
    return Homography(shift @ rot)


@dataclass(frozen=True)
class BenchScenario:
    t1: Raster
    t2_distorted: Raster
    gt_homography: Homography
    gt_change: Raster
    spec: DistortionSpec


def generate_scenario(t1: Raster, t2_aligned: Raster, gt_change: Raster,
                      spec: DistortionSpec) -> BenchScenario:
    """Distort ``t2_aligned`` so that ``gt_homography`` maps it back onto T1."""
    if not (t1.shape == t2_aligned.shape == gt_change.shape):
        raise ContractError(
            f"dimension mismatch: t1 {t1.width}x{t1.height}, t2 {t2_aligned.width}x{t2_aligned.height}, "
            f"gt {gt_change.width}x{gt_change.height}")
    spec.validate()
    gt_h = distortion_homography(spec, t1.width, t1.height)
    t2_distorted, _ = warp_raster(t2_aligned, gt_h.inverse(), t1.width, t1.height)
    return BenchScenario(t1, t2_distorted, gt_h, gt_change, spec)


def write_bundle(sc: BenchScenario, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_raster(sc.t1, out / "t1.png")
    save_raster(sc.t2_distorted, out / "t2_distorted.png")
    save_raster(sc.gt_change, out / "gt_change.png")
    (out / "gt_h.json").write_text(json.dumps(sc.gt_homography.to_json(), indent=2) + "\n")
    (out / "spec.json").write_text(json.dumps(sc.spec.to_json(), indent=2) + "\n")


def read_bundle(bundle_dir) -> BenchScenario:
    d = Path(bundle_dir)
    return BenchScenario(
        load_raster(d / "t1.png"), load_raster(d / "t2_distorted.png"),
        Homography.from_json(json.loads((d / "gt_h.json").read_text())),
        load_raster(d / "gt_change.png"),
        DistortionSpec.from_json(json.loads((d / "spec.json").read_text())))


def registration_error(estimated: Homography, gt: Homography, width: int, height: int,
                       grid: int = 20) -> Tuple[float, float]:
    """Mean and max displacement between two homographies over a grid of sample points."""
    xs = np.linspace(0, width - 1, grid)
    ys = np.linspace(0, height - 1, grid)
    pts = np.stack(np.meshgrid(xs, ys), axis=-1).reshape(-1, 2)
    d = np.sqrt(((project(estimated.m, pts) - project(gt.m, pts)) ** 2).sum(axis=1))
    return float(d.mean()), float(d.max())


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticPair:
    t1: Raster
    t2_aligned: Raster
    gt_change: Raster


def _ground(rng: np.random.Generator, width: int, height: int) -> np.ndarray:
    g = np.zeros((height, width))
    for sigma, amp in ((24, 40.0), (8, 22.0), (2.5, 10.0)):
        n = ndimage.gaussian_filter(rng.standard_normal((height, width)), sigma, mode="wrap")
        g += amp * n / (n.std() + 1e-12)
    return 95 + 0.6 * g


def _building_polygon(rng: np.random.Generator, cx: float, cy: float, size: float) -> List[Tuple[float, float]]:
    w = size * rng.uniform(0.6, 1.0)
    h = size * rng.uniform(0.6, 1.0)
    a = rng.uniform(0, math.pi / 2)
    c, s = math.cos(a), math.sin(a)
    base = [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2), (-w / 2, h / 2)]
    if rng.random() < 0.4:
        # L-shaped footprint
        cut_w, cut_h = w * rng.uniform(0.3, 0.5), h * rng.uniform(0.3, 0.5)
        base = [(-w / 2, -h / 2), (w / 2, -h / 2), (w / 2, h / 2 - cut_h),
                (w / 2 - cut_w, h / 2 - cut_h), (w / 2 - cut_w, h / 2), (-w / 2, h / 2)]
    return [(cx + c * x - s * y, cy + s * x + c * y) for x, y in base]


def _fill(poly, width: int, height: int) -> np.ndarray:
    im = Image.new("L", (width, height), 0)
    ImageDraw.Draw(im).polygon([(round(x, 3), round(y, 3)) for x, y in poly], fill=255)
    return np.asarray(im) > 0


def synthetic_pair(width: int = 512, height: int = 512, seed: int = 0, n_buildings: int = 40,
                   n_added: int = 5, n_removed: int = 3) -> SyntheticPair:
    """Textured scene with bright polygonal buildings and a changed second epoch.

    The second epoch gains ``n_added`` buildings, loses ``n_removed``, and
    gets a global gain/offset plus independent noise on both epochs.
    """
    rng = np.random.default_rng(seed)
    ground = _ground(rng, width, height)

    for _ in range(3):
        # dark roads
        im = Image.new("L", (width, height), 0)
        x0, y0 = rng.uniform(0, width), rng.uniform(0, height)
        ang = rng.uniform(0, math.pi)
        L = 2 * max(width, height)
        ImageDraw.Draw(im).line([(x0 - L * math.cos(ang), y0 - L * math.sin(ang)),
                                 (x0 + L * math.cos(ang), y0 + L * math.sin(ang))],
                                fill=255, width=int(rng.integers(5, 10)))
        ground = np.where(np.asarray(im) > 0, 45 + 5 * rng.standard_normal((height, width)), ground)

    occupied = np.zeros((height, width), dtype=bool)
    footprints = []
    attempts = 0
    total = n_buildings + n_added
    while len(footprints) < total and attempts < 50 * total:
        attempts += 1
        size = rng.uniform(18, 46)
        cx, cy = rng.uniform(size, width - size), rng.uniform(size, height - size)
        poly = _building_polygon(rng, cx, cy, size)
        fp = _fill(poly, width, height)
        if (ndimage.binary_dilation(fp, iterations=4) & occupied).any():
            continue
        occupied |= fp
        tone = rng.uniform(175, 235)
        # roof with a ridge: two tones split along a random line
        yy, xx = np.mgrid[0:height, 0:width]
        ridge = ((xx - cx) * math.cos(rng.uniform(0, math.pi)) + (yy - cy) * 0.5) > 0
        footprints.append((fp, np.where(ridge, tone, tone - rng.uniform(15, 35))))

    removed = set(rng.choice(n_buildings, size=min(n_removed, n_buildings), replace=False).tolist())
    e1 = ground.copy()
    e2 = ground.copy()
    change = np.zeros((height, width), dtype=bool)
    for i, (fp, roof) in enumerate(footprints):
        added = i >= n_buildings
        if not added:
            e1[fp] = roof[fp]
        if i not in removed:
            e2[fp] = roof[fp]
        if added or i in removed:
            change |= fp

    e2 = 1.04 * e2 + 6.0
    e1 = e1 + 1.5 * rng.standard_normal(e1.shape)
    e2 = e2 + 1.5 * rng.standard_normal(e2.shape)

    def to_raster(a):
        return Raster(np.clip(np.rint(a), 0, 255).astype(np.uint8))

    return SyntheticPair(to_raster(e1), to_raster(e2),
                         Raster(np.where(change, 255, 0).astype(np.uint8)))


def synthetic_corpus(n_scenes: int = 4, levels=(1, 2, 3), width: int = 512, height: int = 512,
                     seed: int = 0) -> Dict[Tuple[int, int], BenchScenario]:
    """``n_scenes`` base scenes, each distorted at every level, keyed ``(scene, level)``."""
    out = {}
    for k in range(n_scenes):
        pair = synthetic_pair(width, height, seed=seed * 1000 + k)
        for level in levels:
            spec = draw_distortion(level, seed * 1000 + 10 * k + level)
            out[(k, level)] = generate_scenario(pair.t1, pair.t2_aligned, pair.gt_change, spec)
    return out
