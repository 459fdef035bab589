"""Keypoint matching: built-in corner matcher, plugin seam and hierarchical matching."""

from __future__ import annotations

import json
import logging
import math
import subprocess
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Protocol, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import ContractError, PluginError
from .featpyr import FilterBank, fused_pyramid, gaussian_bank
from .raster import Raster, save_raster

log = logging.getLogger(__name__)

DEDUP_RADIUS = 1.0


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """Paired sub-pixel coordinates in the T1 and T2 frames.

    ``scale`` is the downsampling factor of the frame the coordinates live in;
    ``level`` remembers which pyramid level a pair was matched on and survives
    re-localisation (it only feeds per-level statistics).
    """

    t1: np.ndarray
    t2: np.ndarray
    conf: np.ndarray
    scale: np.ndarray
    level: np.ndarray

    def __post_init__(self):
        n = len(self.t1)
        arrays = {
            "t1": np.asarray(self.t1, dtype=np.float64).reshape(n, 2),
            "t2": np.asarray(self.t2, dtype=np.float64).reshape(-1, 2),
            "conf": np.asarray(self.conf, dtype=np.float64).reshape(-1),
            "scale": np.asarray(self.scale, dtype=np.int64).reshape(-1),
            "level": np.asarray(self.level, dtype=np.int64).reshape(-1),
        }
        for k, a in arrays.items():
            if len(a) != n:
                raise ContractError(f"KeypointSet field {k} has {len(a)} rows, expected {n}")
            a.flags.writeable = False
            object.__setattr__(self, k, a)
        if not (np.all(np.isfinite(self.t1)) and np.all(np.isfinite(self.t2))
                and np.all(np.isfinite(self.conf))):
            raise ContractError("KeypointSet contains non-finite values")

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls.from_arrays(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0))

    @classmethod
    def from_arrays(cls, t1, t2, conf, scale: int = 1, level: Optional[int] = None) -> "KeypointSet":
        n = len(t1)
        return cls(t1, t2, conf, np.full(n, scale), np.full(n, scale if level is None else level))

    @classmethod
    def concat(cls, sets: Sequence["KeypointSet"]) -> "KeypointSet":
        if not sets:
            return cls.empty()
        return cls(*(np.concatenate([getattr(s, f) for s in sets])
                     for f in ("t1", "t2", "conf", "scale", "level")))

    def __len__(self):
        return len(self.t1)

    def take(self, idx) -> "KeypointSet":
        return KeypointSet(self.t1[idx], self.t2[idx], self.conf[idx], self.scale[idx], self.level[idx])

    def t1_array(self) -> np.ndarray:
        return self.t1

    def t2_array(self) -> np.ndarray:
        return self.t2

    def swapped(self) -> "KeypointSet":
        return KeypointSet(self.t2, self.t1, self.conf, self.scale, self.level)

    @property
    def pairs(self) -> List[Tuple[Tuple[float, float], Tuple[float, float]]]:
        return [((a[0], a[1]), (b[0], b[1])) for a, b in zip(self.t1.tolist(), self.t2.tolist())]

    def within_bounds(self, w1: int, h1: int, w2: int, h2: int) -> bool:
        """True when every endpoint lies inside its image (``w, h`` at the recorded scale)."""
        def inside(p, w, h):
            return np.all((p[:, 0] >= 0) & (p[:, 0] <= w - 1) & (p[:, 1] >= 0) & (p[:, 1] <= h - 1))
        return bool(inside(self.t1, w1, h1) and inside(self.t2, w2, h2))

    def level_counts(self) -> dict:
        return {int(s): int((self.level == s).sum()) for s in (1, 2, 4)}

    def to_json(self) -> dict:
        return {"pairs": [
            {"t1": [float(a[0]), float(a[1])], "t2": [float(b[0]), float(b[1])],
             "conf": float(c), "scale": int(s), "level": int(lv)}
            for a, b, c, s, lv in zip(self.t1, self.t2, self.conf, self.scale, self.level)]}

    @classmethod
    def from_json(cls, obj: dict) -> "KeypointSet":
        try:
            pairs = obj["pairs"]
            t1 = [p["t1"] for p in pairs]
            t2 = [p["t2"] for p in pairs]
            conf = [p.get("conf", 1.0) for p in pairs]
            scale = [p.get("scale", 1) for p in pairs]
            level = [p.get("level", p.get("scale", 1)) for p in pairs]
        except (KeyError, TypeError) as exc:
            raise ContractError(f"malformed KeypointSet JSON: {exc}") from exc
        if not pairs:
            return cls.empty()
        return cls(np.asarray(t1, dtype=np.float64), np.asarray(t2, dtype=np.float64), conf, scale, level)


class MatcherPlugin(Protocol):
    def match(self, a: Raster, b: Raster) -> KeypointSet:
        """Return scale-1 pairs with ``t1`` in ``a`` and ``t2`` in ``b``."""
        ...


# --------------------------------------------------------------------------
# Corner detection
# --------------------------------------------------------------------------

def corner_response(plane: np.ndarray) -> np.ndarray:
    """Shi-Tomasi minimum eigenvalue of the 3x3-summed gradient structure tensor."""
    gx = ndimage.sobel(plane, axis=1, mode="reflect") / 8.0
    gy = ndimage.sobel(plane, axis=0, mode="reflect") / 8.0
    sxx = ndimage.uniform_filter(gx * gx, 3, mode="reflect") * 9
    syy = ndimage.uniform_filter(gy * gy, 3, mode="reflect") * 9
    sxy = ndimage.uniform_filter(gx * gy, 3, mode="reflect") * 9
    half_tr = 0.5 * (sxx + syy)
    disc = np.sqrt(np.maximum(0.25 * (sxx - syy) ** 2 + sxy ** 2, 0.0))
    return np.maximum(half_tr - disc, 0.0)


def _subpixel(resp: np.ndarray, x: int, y: int) -> Tuple[float, float]:
    h, w = resp.shape
    dx = dy = 0.0
    if 0 < x < w - 1:
        l, c, r = resp[y, x - 1], resp[y, x], resp[y, x + 1]
        den = l - 2 * c + r
        if den < 0:
            dx = float(np.clip(0.5 * (l - r) / den, -0.5, 0.5))
    if 0 < y < h - 1:
        t, c, b = resp[y - 1, x], resp[y, x], resp[y + 1, x]
        den = t - 2 * c + b
        if den < 0:
            dy = float(np.clip(0.5 * (t - b) / den, -0.5, 0.5))
    return x + dx, y + dy


def detect_corners(img, max_points: int = 1000, nms_radius: int = 4,
                   quality: float = 0.01, border: int = 0) -> List[Tuple[float, float, float]]:
    """Strongest-first Shi-Tomasi corners as ``(x, y, strength)``.

    Candidates are local maxima above ``quality * max_response``; a greedy pass
    keeps a candidate only if no stronger kept corner lies within ``nms_radius``.
    ``img`` may be a :class:`Raster` or a 2-D float array.
    """
    plane = img.gray() if isinstance(img, Raster) else np.asarray(img, dtype=np.float64)
    resp = corner_response(plane)
    peak = float(resp.max()) if resp.size else 0.0
    if peak <= 1e-9:
        return []
    size = 2 * nms_radius + 1
    local_max = resp == ndimage.maximum_filter(resp, size=size, mode="constant", cval=-1.0)
    cand = local_max & (resp > quality * peak)
    if border > 0:
        cand[:border, :] = cand[-border:, :] = False
        cand[:, :border] = cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    if len(xs) == 0:
        return []
    strength = resp[ys, xs]
    order = np.lexsort((xs, ys, -strength))

    kept: List[Tuple[float, float, float]] = []
    occupied = np.zeros_like(cand)
    r2 = nms_radius * nms_radius
    h, w = resp.shape
    for i in order:
        x, y = int(xs[i]), int(ys[i])
        if occupied[y, x]:
            continue
        sx, sy = _subpixel(resp, x, y)
        kept.append((sx, sy, float(strength[i])))
        if len(kept) >= max_points:
            break
        y0, y1 = max(0, y - nms_radius), min(h, y + nms_radius + 1)
        x0, x1 = max(0, x - nms_radius), min(w, x + nms_radius + 1)
        yy, xx = np.mgrid[y0:y1, x0:x1]
        occupied[y0:y1, x0:x1] |= (yy - y) ** 2 + (xx - x) ** 2 <= r2
    return kept


# --------------------------------------------------------------------------
# Built-in matcher
# --------------------------------------------------------------------------

@dataclass
class BuiltinMatcher:
    """Corner detection, oriented normalised-patch descriptors, mutual NN + ratio test.

    Patches are sampled on a grid rotated to the intensity-centroid orientation
    of each corner, so matching tolerates in-plane rotation.
    """

    max_points: int = 1500
    patch: int = 11
    ratio: float = 0.9
    nms_radius: int = 4
    orientation_radius: int = 7
    blur_sigma: float = 1.0

    @property
    def border(self) -> int:
        return max(self.orientation_radius, int(math.ceil((self.patch // 2) * math.sqrt(2)))) + 1

    def describe(self, img: Raster) -> Tuple[np.ndarray, np.ndarray]:
        """Keypoints ``(N, 2)`` and unit-variance descriptors ``(N, patch**2)``."""
        plane = img.gray()
        if min(plane.shape) <= 2 * self.border:
            return np.zeros((0, 2)), np.zeros((0, self.patch ** 2))
        corners = detect_corners(plane, self.max_points, self.nms_radius, border=self.border)
        if not corners:
            return np.zeros((0, 2)), np.zeros((0, self.patch ** 2))
        pts = np.array([(x, y) for x, y, _ in corners])
        smooth = ndimage.gaussian_filter(plane, self.blur_sigma, mode="reflect")

        r = self.orientation_radius
        oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
        disc = ox ** 2 + oy ** 2 <= r * r
        ox, oy = ox[disc].astype(np.float64), oy[disc].astype(np.float64)
        vals = ndimage.map_coordinates(
            smooth, [pts[:, 1:2] + oy[None, :], pts[:, 0:1] + ox[None, :]], order=1, mode="nearest")
        vals = vals - vals.mean(axis=1, keepdims=True)
        theta = np.arctan2((vals * oy).sum(axis=1), (vals * ox).sum(axis=1))

        half = self.patch // 2
        gy, gx = np.mgrid[-half:half + 1, -half:half + 1]
        gx, gy = gx.ravel().astype(np.float64), gy.ravel().astype(np.float64)
        c, s = np.cos(theta)[:, None], np.sin(theta)[:, None]
        sx = pts[:, 0:1] + c * gx - s * gy
        sy = pts[:, 1:2] + s * gx + c * gy
        desc = ndimage.map_coordinates(smooth, [sy, sx], order=1, mode="nearest")
        desc = desc - desc.mean(axis=1, keepdims=True)
        std = desc.std(axis=1)
        ok = std > 1e-6
        desc = desc[ok] / std[ok, None]
        return pts[ok], desc

    def match(self, a: Raster, b: Raster) -> KeypointSet:
        pa, da = self.describe(a)
        pb, db = self.describe(b)
        if len(pa) < 2 or len(pb) < 2:
            return KeypointSet.empty()
        d2 = ((da ** 2).sum(1)[:, None] + (db ** 2).sum(1)[None, :] - 2.0 * da @ db.T)
        dist = np.sqrt(np.maximum(d2, 0.0))

        best_b = np.argmin(dist, axis=1)
        best_a = np.argmin(dist, axis=0)
        ia = np.nonzero(best_a[best_b] == np.arange(len(pa)))[0]
        ib = best_b[ia]
        row_sorted = np.partition(dist, 1, axis=1)[:, :2]
        col_sorted = np.partition(dist, 1, axis=0)[:2, :]
        best = dist[ia, ib]
        second = np.minimum(row_sorted[ia, 1], col_sorted[1, ib])
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(second > 0, best / second, 1.0)
        keep = ratio < self.ratio
        ia, ib, ratio = ia[keep], ib[keep], ratio[keep]
        t1, t2 = pa[ia], pb[ib]
        order = np.lexsort((t2[:, 1], t2[:, 0], t1[:, 1], t1[:, 0]))
        return KeypointSet.from_arrays(t1[order], t2[order], (1.0 - ratio)[order])


def builtin_match(a: Raster, b: Raster) -> KeypointSet:
    return BuiltinMatcher().match(a, b)


@dataclass
class SubprocessMatcher:
    """External matcher: ``command... a.png b.png out.json`` writing KeypointSet JSON."""

    command: Sequence[str]
    timeout: Optional[float] = None

    def match(self, a: Raster, b: Raster) -> KeypointSet:
        with tempfile.TemporaryDirectory(prefix="regcd-match-") as tmp:
            pa, pb, out = Path(tmp, "a.png"), Path(tmp, "b.png"), Path(tmp, "keypoints.json")
            save_raster(a, pa)
            save_raster(b, pb)
            cmd = [*self.command, str(pa), str(pb), str(out)]
            try:
                proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise PluginError(f"matcher {self.command[0]!r} failed to run: {exc}") from exc
            if proc.returncode != 0:
                raise PluginError(f"matcher exited with status {proc.returncode}: {proc.stderr.strip()}")
            try:
                obj = json.loads(out.read_text())
            except (OSError, ValueError) as exc:
                raise PluginError(f"matcher produced no readable JSON: {exc}") from exc
        kps = KeypointSet.from_json(obj)
        if len(kps) and np.any(kps.scale != 1):
            raise PluginError("matcher must return scale-1 pairs")
        if not kps.within_bounds(a.width, a.height, b.width, b.height):
            raise PluginError("matcher returned coordinates outside the images")
        return kps


# --------------------------------------------------------------------------
# Hierarchical matching
# --------------------------------------------------------------------------

def relocalize(kps: KeypointSet) -> KeypointSet:
    """Express feature-map pairs in original pixels by multiplying by their stride."""
    if len(kps) == 0:
        return kps
    scales = np.unique(kps.scale)
    if len(scales) != 1:
        raise ContractError(f"relocalize needs a single source scale, got {scales.tolist()}")
    s = int(scales[0])
    if s not in (2, 4):
        raise ContractError(f"relocalize expects scale 2 or 4, got {s}")
    return KeypointSet(kps.t1 * s, kps.t2 * s, kps.conf, np.ones(len(kps), dtype=np.int64), kps.level)


def dedupe(kps: KeypointSet, radius: float = DEDUP_RADIUS) -> KeypointSet:
    """Drop pairs whose T1 and T2 endpoints both lie within ``radius`` of a kept pair.

    Pairs are first ordered by ``(x1, y1, x2, y2)``, then visited by descending
    confidence (stable), so the outcome does not depend on input order.
    """
    n = len(kps)
    if n == 0:
        return kps
    lex = np.lexsort((kps.t2[:, 1], kps.t2[:, 0], kps.t1[:, 1], kps.t1[:, 0]))
    k = kps.take(lex)
    visit = np.argsort(-k.conf, kind="stable")
    tree = cKDTree(np.hstack([k.t1, k.t2]))
    dropped = np.zeros(n, dtype=bool)
    kept = []
    for i in visit:
        if dropped[i]:
            continue
        kept.append(i)
        for j in tree.query_ball_point(np.hstack([k.t1[i], k.t2[i]]), r=2 * radius):
            if j != i and np.hypot(*(k.t1[j] - k.t1[i])) <= radius and np.hypot(*(k.t2[j] - k.t2[i])) <= radius:
                dropped[j] = True
    return k.take(np.sort(np.asarray(kept)))


def hierarchical_match(t1: Raster, t2: Raster, plugin: Optional[MatcherPlugin] = None,
                       bank: Optional[FilterBank] = None, workers: int = 1) -> KeypointSet:
    """Union of matches on the originals and on the fused stride-2 and stride-4 maps.

    Feature-level pairs are re-localised to original pixels before the union,
    which is then de-duplicated with :func:`dedupe`.
    """
    plugin = plugin or BuiltinMatcher()
    bank = bank or gaussian_bank()
    f1 = fused_pyramid(t1, bank)
    f2 = fused_pyramid(t2, bank)
    jobs = [(t1, t2), (f1[0], f2[0]), (f1[1], f2[1])]

    if workers > 1:
        with ThreadPoolExecutor(max_workers=min(workers, 3)) as ex:
            results = list(ex.map(lambda ab: plugin.match(*ab), jobs))
    else:
        results = [plugin.match(a, b) for a, b in jobs]

    levels = [results[0]]
    for res, s in zip(results[1:], (2, 4)):
        tagged = KeypointSet(res.t1, res.t2, res.conf, np.full(len(res), s), np.full(len(res), s))
        levels.append(relocalize(tagged))
    log.debug("hierarchical match counts: ori=%d c1=%d l1=%d", *(len(k) for k in levels))
    return dedupe(KeypointSet.concat(levels))
