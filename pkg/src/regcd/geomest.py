"""Homography estimation (normalised DLT inside RANSAC) and overlap geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import (ConfigError, DegeneracyError, EstimationError, GeometryError,
                     InsufficientDataError)
from .raster import Raster, mask_from_bool

_EPS_W = 1e-12
_COLLINEAR_TOL = 1e-8
_MAX_CONDITION = 1e10


@dataclass(frozen=True, eq=False)
class Homography:
    """Invertible 3x3 projective map, scaled so ``m[2, 2] == 1`` when possible."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise GeometryError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise GeometryError("homography has non-finite entries")
        if abs(m[2, 2]) > 1e-12:
            m = m / m[2, 2]
        elif not np.any(m):
            raise GeometryError("homography is singular")
        else:
            m = m / np.linalg.norm(m)
        if abs(np.linalg.det(m)) <= 1e-12:
            raise GeometryError("homography is singular")
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0, tx], [0, 1.0, ty], [0, 0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.m @ other.m)

    def to_json(self) -> dict:
        return {"h": [[float(v) for v in row] for row in self.m]}

    @classmethod
    def from_json(cls, obj: dict) -> "Homography":
        return cls(np.asarray(obj["h"], dtype=np.float64))

    def __repr__(self):
        return f"Homography({np.array2string(self.m, precision=6)})"


@dataclass(frozen=True)
class OverlapPolygon:
    """Convex polygon, vertices counter-clockwise (positive shoelace area)."""

    vertices: Tuple[Tuple[float, float], ...] = ()

    @property
    def is_empty(self) -> bool:
        return len(self.vertices) < 3

    @property
    def area(self) -> float:
        return shoelace_area(self.vertices)

    def to_json(self) -> dict:
        return {"vertices": [[float(x), float(y)] for x, y in self.vertices]}

    @classmethod
    def from_json(cls, obj: dict) -> "OverlapPolygon":
        return cls(tuple((float(x), float(y)) for x, y in obj["vertices"]))


@dataclass(frozen=True)
class RansacConfig:
    inlier_threshold: float = 3.0
    max_iterations: int = 5000
    confidence: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if not self.inlier_threshold > 0:
            raise ConfigError(f"inlier_threshold must be > 0, got {self.inlier_threshold}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if not 0 < self.confidence < 1:
            raise ConfigError(f"confidence must lie in (0, 1), got {self.confidence}")


# --------------------------------------------------------------------------
# Point mapping
# --------------------------------------------------------------------------

def apply_h(h: Homography, p: Tuple[float, float]) -> Tuple[float, float]:
    m = h.m if isinstance(h, Homography) else np.asarray(h, dtype=np.float64)
    x, y = p
    u = m[0, 0] * x + m[0, 1] * y + m[0, 2]
    v = m[1, 0] * x + m[1, 1] * y + m[1, 2]
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    if abs(w) <= _EPS_W:
        raise GeometryError(f"point ({x}, {y}) maps to the line at infinity")
    return (u / w, v / w)


def project(m: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Vectorised :func:`apply_h` for an ``(N, 2)`` array; raises on points at infinity."""
    m = getattr(m, "m", m)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = pts @ m[:, :2].T + m[:, 2]
    w = hom[:, 2]
    if np.any(np.abs(w) <= _EPS_W):
        raise GeometryError("point maps to the line at infinity")
    return hom[:, :2] / w[:, None]


# --------------------------------------------------------------------------
# DLT
# --------------------------------------------------------------------------

def _hartley(pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Similarity taking ``pts`` to zero centroid and mean distance sqrt(2)."""
    c = pts.mean(axis=0)
    d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
    if d <= 0:
        raise DegeneracyError("all points coincide")
    s = math.sqrt(2) / d
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return t, (pts - c) * s


def _has_collinear_triple(p: np.ndarray) -> bool:
    n = len(p)
    for i in range(n):
        for j in range(i + 1, n):
            for k in range(j + 1, n):
                a = p[j] - p[i]
                b = p[k] - p[i]
                if abs(a[0] * b[1] - a[1] * b[0]) < _COLLINEAR_TOL:
                    return True
    return False


def _design_matrix(s: np.ndarray, d: np.ndarray) -> np.ndarray:
    n = len(s)
    a = np.zeros((2 * n, 9))
    x, y = s[:, 0], s[:, 1]
    u, v = d[:, 0], d[:, 1]
    a[0::2, 0] = -x
    a[0::2, 1] = -y
    a[0::2, 2] = -1
    a[0::2, 6] = u * x
    a[0::2, 7] = u * y
    a[0::2, 8] = u
    a[1::2, 3] = -x
    a[1::2, 4] = -y
    a[1::2, 5] = -1
    a[1::2, 6] = v * x
    a[1::2, 7] = v * y
    a[1::2, 8] = v
    return a


def dlt_homography(src, dst) -> Homography:
    """Least-squares homography with ``dst ~ H src`` under Hartley normalisation.

    Raises
    ------
    InsufficientDataError
        Fewer than four correspondences.
    DegeneracyError
        The correspondences leave the solution under-determined (rank < 8,
        a collinear triple in a minimal set, or a singular result).
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst):
        raise ValueError(f"src has {len(src)} points but dst has {len(dst)}")
    if len(src) < 4:
        raise InsufficientDataError(f"need >= 4 correspondences, got {len(src)}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise ValueError("non-finite coordinates")

    ts, ns = _hartley(src)
    td, nd = _hartley(dst)
    if len(src) == 4 and (_has_collinear_triple(ns) or _has_collinear_triple(nd)):
        raise DegeneracyError("minimal sample contains three collinear points")

    a = _design_matrix(ns, nd)
    _, sv, vt = np.linalg.svd(a)
    if sv[7] <= sv[0] / _MAX_CONDITION:
        raise DegeneracyError(f"design matrix rank < 8 (condition {sv[0] / max(sv[7], 1e-300):.3g})")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(td) @ hn @ ts
    try:
        return Homography(m)
    except GeometryError as exc:
        raise DegeneracyError(f"fit produced an invalid homography: {exc}") from exc


# --------------------------------------------------------------------------
# RANSAC
# --------------------------------------------------------------------------

def reprojection_errors(m: np.ndarray, t2: np.ndarray, t1: np.ndarray) -> np.ndarray:
    """``|| H t2 - t1 ||`` per pair; points sent to infinity get ``inf``."""
    hom = t2 @ m[:, :2].T + m[:, 2]
    w = hom[:, 2]
    err = np.full(len(t2), np.inf)
    ok = np.abs(w) > _EPS_W
    proj = hom[ok, :2] / w[ok, None]
    err[ok] = np.sqrt(((proj - t1[ok]) ** 2).sum(axis=1))
    return err


def _required_iterations(inlier_ratio: float, confidence: float, sample: int = 4) -> float:
    good = inlier_ratio ** sample
    if good >= 1.0:
        return 0
    if good <= 0.0:
        return math.inf
    return math.log(1 - confidence) / math.log(1 - good)


def best_minimal_model(t1: np.ndarray, t2: np.ndarray, cfg: RansacConfig) -> np.ndarray:
    """Sampling stage of :func:`ransac_homography`: the best 4-point model before refitting."""
    n = len(t1)
    if n < 4:
        raise EstimationError(f"RANSAC needs >= 4 pairs, got {n}")
    rng = np.random.default_rng(cfg.seed)
    thr = cfg.inlier_threshold
    best_count, best_m, best_err_sum = -1, None, math.inf
    needed = cfg.max_iterations
    it = 0
    while it < min(needed, cfg.max_iterations):
        it += 1
        idx = rng.choice(n, size=4, replace=False)
        try:
            h = dlt_homography(t2[idx], t1[idx])
        except GeometryError:
            continue
        err = reprojection_errors(h.m, t2, t1)
        inl = err <= thr
        count = int(inl.sum())
        err_sum = float(err[inl].sum())
        if count > best_count or (count == best_count and err_sum < best_err_sum):
            best_count, best_m, best_err_sum = count, h.m, err_sum
            needed = _required_iterations(count / n, cfg.confidence)
    if best_m is None or best_count < 4:
        raise EstimationError(f"no model reached 4 inliers (best {max(best_count, 0)} of {n})")
    return best_m


def ransac_homography(kps, cfg: RansacConfig = RansacConfig()) -> Tuple[Homography, np.ndarray]:
    """Robust homography mapping T2 keypoints onto their T1 partners.

    ``kps`` is a :class:`~regcd.matchkit.KeypointSet` or a ``(t1, t2)`` pair of
    ``(N, 2)`` arrays. Minimal samples come from ``numpy.random.default_rng(seed)``,
    so the result is a pure function of the inputs and ``cfg``.

    The best minimal-sample model is refit on its inliers and the refit is
    iterated while the inlier count does not drop. Returns the model and a
    boolean inlier mask consistent with it.
    """
    if hasattr(kps, "t1_array"):
        t1, t2 = kps.t1_array(), kps.t2_array()
    else:
        t1, t2 = (np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in kps)
    best_m = best_minimal_model(t1, t2, cfg)
    thr = cfg.inlier_threshold

    m, inl = best_m, reprojection_errors(best_m, t2, t1) <= thr
    for _ in range(10):
        try:
            refit = dlt_homography(t2[inl], t1[inl]).m
        except GeometryError:
            break
        rin = reprojection_errors(refit, t2, t1) <= thr
        if rin.sum() < inl.sum():
            break
        converged = np.array_equal(rin, inl)
        m, inl = refit, rin
        if converged:
            break
    return Homography(m), inl


# --------------------------------------------------------------------------
# Overlap polygon
# --------------------------------------------------------------------------

def shoelace_signed(vertices: Sequence[Tuple[float, float]]) -> float:
    if len(vertices) < 3:
        return 0.0
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def shoelace_area(vertices: Sequence[Tuple[float, float]]) -> float:
    return abs(shoelace_signed(vertices))


def _ccw(vertices: List[Tuple[float, float]]) -> List[Tuple[float, float]]:
    return vertices if shoelace_signed(vertices) >= 0 else vertices[::-1]


def clip_convex(subject: Sequence[Tuple[float, float]],
                clip: Sequence[Tuple[float, float]]) -> List[Tuple[float, float]]:
    """Sutherland-Hodgman clipping of ``subject`` by a convex CCW ``clip`` polygon."""
    out = list(subject)
    if not out or len(clip) < 3:
        return []

    def inside(p, a, b):
        return (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0

    def intersect(s, e, a, b):
        dx, dy = e[0] - s[0], e[1] - s[1]
        ex, ey = b[0] - a[0], b[1] - a[1]
        den = ex * dy - ey * dx
        t = (ey * (s[0] - a[0]) - ex * (s[1] - a[1])) / den
        return (s[0] + t * dx, s[1] + t * dy)

    a = clip[-1]
    for b in clip:
        if not out:
            break
        inp, out = out, []
        s = inp[-1]
        for e in inp:
            if inside(e, a, b):
                if not inside(s, a, b):
                    out.append(intersect(s, e, a, b))
                out.append(e)
            elif inside(s, a, b):
                out.append(intersect(s, e, a, b))
            s = e
        a = b
    return out


def _dedupe(vertices: List[Tuple[float, float]], tol: float = 1e-9) -> List[Tuple[float, float]]:
    res: List[Tuple[float, float]] = []
    for p in vertices:
        if not res or abs(p[0] - res[-1][0]) > tol or abs(p[1] - res[-1][1]) > tol:
            res.append(p)
    while len(res) > 1 and abs(res[0][0] - res[-1][0]) <= tol and abs(res[0][1] - res[-1][1]) <= tol:
        res.pop()
    return res


def rect(width: float, height: float) -> List[Tuple[float, float]]:
    return [(0.0, 0.0), (float(width), 0.0), (float(width), float(height)), (0.0, float(height))]


def overlap_polygon(t1_w: int, t1_h: int, t2_w: int, t2_h: int, h: Homography) -> OverlapPolygon:
    """Intersection of T1's frame with the image of T2's frame under ``h``, in T1 pixels.

    Frames are the rectangles ``[0, w] x [0, h]``.
    """
    m = h.m if isinstance(h, Homography) else Homography(h).m
    if abs(np.linalg.det(m)) <= 1e-12:
        raise GeometryError("overlap requires an invertible homography")
    corners = np.asarray(rect(t2_w, t2_h))
    w = corners @ m[2, :2] + m[2, 2]
    if np.any(np.abs(w) <= _EPS_W) or not (np.all(w > 0) or np.all(w < 0)):
        raise GeometryError("T2 frame straddles the line at infinity under h")
    quad = _ccw([tuple(p) for p in project(m, corners)])
    poly = _dedupe(clip_convex(quad, rect(t1_w, t1_h)))
    if len(poly) < 3 or shoelace_area(poly) <= 1e-12:
        return OverlapPolygon(())
    return OverlapPolygon(tuple(_ccw(poly)))


def polygon_mask(poly: OverlapPolygon, width: int, height: int) -> Raster:
    """0/255 mask; a pixel is set when its centre ``(x+0.5, y+0.5)`` lies in or on ``poly``."""
    if poly.is_empty:
        return Raster.zeros(width, height)
    v = np.asarray(_ccw(list(poly.vertices)), dtype=np.float64)
    cx = np.arange(width) + 0.5
    cy = np.arange(height) + 0.5
    px, py = np.meshgrid(cx, cy)
    inside = np.ones((height, width), dtype=bool)
    scale = max(1.0, float(np.abs(v).max()))
    for a, b in zip(v, np.roll(v, -1, axis=0)):
        cross = (b[0] - a[0]) * (py - a[1]) - (b[1] - a[1]) * (px - a[0])
        inside &= cross >= -1e-9 * scale * scale
    return mask_from_bool(inside)
