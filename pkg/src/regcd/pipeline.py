"""Registration and detection stages composed from the library modules."""

from __future__ import annotations

import json
import shlex
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .changekit import ChangeMap, apply_overlap_mask, detect_changes
from .errors import ConfigError
from .featpyr import gaussian_bank
from .geomest import (Homography, OverlapPolygon, RansacConfig, overlap_polygon, polygon_mask,
                      ransac_homography)
from .matchkit import BuiltinMatcher, KeypointSet, SubprocessMatcher, hierarchical_match
from .pretrainkit import BuiltinSegmenter, SubprocessSegmenter
from .raster import MIN_TILE_SIZE, Raster, warp_raster

PluginSpec = Union[str, Sequence[str]]


@dataclass(frozen=True)
class PipelineConfig:
    tile_size: int = 256
    ransac: RansacConfig = field(default_factory=RansacConfig)
    threshold: float = 0.5
    omega: float = 2.0
    matcher: PluginSpec = "builtin"
    segmenter: PluginSpec = "builtin"
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if not isinstance(self.tile_size, int) or self.tile_size < MIN_TILE_SIZE:
            raise ConfigError(f"tile_size must be an integer >= {MIN_TILE_SIZE}, got {self.tile_size!r}")
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if not self.omega > 0:
            raise ConfigError(f"omega must be > 0, got {self.omega}")
        if not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError(f"workers must be a positive integer, got {self.workers!r}")
        if not isinstance(self.seed, int) or self.seed < 0 or self.seed >= 2 ** 64:
            raise ConfigError(f"seed must be an unsigned 64-bit integer, got {self.seed!r}")
        for name in ("matcher", "segmenter"):
            v = getattr(self, name)
            if not (isinstance(v, str) or (isinstance(v, (list, tuple)) and v and all(isinstance(s, str) for s in v))):
                raise ConfigError(f"{name} must be 'builtin', a command string or an argv list")
        if self.ransac.seed != self.seed:
            object.__setattr__(self, "ransac", replace(self.ransac, seed=self.seed))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        d = dict(d)
        if "ransac" in d:
            r = d["ransac"]
            if not isinstance(r, dict):
                raise ConfigError("ransac must be an object")
            rknown = {f.name for f in fields(RansacConfig)}
            bad = sorted(set(r) - rknown)
            if bad:
                raise ConfigError(f"unknown ransac key(s): {', '.join(bad)}")
            try:
                d["ransac"] = RansacConfig(**r)
            except TypeError as exc:
                raise ConfigError(str(exc)) from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            obj = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(obj, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(obj)

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("matcher", "segmenter"):
            if isinstance(d[k], tuple):
                d[k] = list(d[k])
        return d


def _argv(spec: PluginSpec):
    return shlex.split(spec) if isinstance(spec, str) else list(spec)


def make_matcher(cfg: PipelineConfig):
    return BuiltinMatcher() if cfg.matcher == "builtin" else SubprocessMatcher(_argv(cfg.matcher))


def make_segmenter(cfg: PipelineConfig):
    return BuiltinSegmenter() if cfg.segmenter == "builtin" else SubprocessSegmenter(_argv(cfg.segmenter))


@dataclass(frozen=True)
class Registration:
    keypoints: KeypointSet
    homography: Homography
    inliers: np.ndarray
    t2_registered: Raster
    validity: Raster
    overlap: OverlapPolygon

    def report(self) -> dict:
        counts = self.keypoints.level_counts()
        inl = {lv: int((self.inliers & (self.keypoints.level == lv)).sum()) for lv in (1, 2, 4)}
        return {
            "keypoints": {"original": counts[1], "stride2": counts[2], "stride4": counts[4],
                          "total": len(self.keypoints)},
            "inliers": {"original": inl[1], "stride2": inl[2], "stride4": inl[4],
                        "total": int(self.inliers.sum())},
            "overlap_area": self.overlap.area,
        }


def register_pair(t1: Raster, t2: Raster, cfg: PipelineConfig) -> Registration:
    """Hierarchical matching, RANSAC, warp of T2 into T1's frame, overlap polygon."""
    kps = hierarchical_match(t1, t2, make_matcher(cfg), gaussian_bank(), workers=cfg.workers)
    h, inliers = ransac_homography(kps, cfg.ransac)
    t2r, validity = warp_raster(t2, h, t1.width, t1.height)
    poly = overlap_polygon(t1.width, t1.height, t2.width, t2.height, h)
    return Registration(kps, h, inliers, t2r, validity, poly)


def detect_pair(t1: Raster, t2_registered: Raster, validity: Raster, cfg: PipelineConfig,
                overlap: Optional[OverlapPolygon] = None) -> ChangeMap:
    """Tiled detection, then the overlap mask when a polygon is supplied."""
    cm = detect_changes(t1, t2_registered, validity, segmenter=make_segmenter(cfg),
                        tile_size=cfg.tile_size, threshold=cfg.threshold, workers=cfg.workers)
    if overlap is not None:
        cm = apply_overlap_mask(cm, polygon_mask(overlap, t1.width, t1.height))
    return cm
