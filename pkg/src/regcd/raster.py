"""8-bit raster model, file I/O, homography warping and tile partition/stitch.

Pixel ``(x, y)`` addresses column ``x`` and row ``y``; warps treat the pixel
centre as the integer coordinate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np
from PIL import Image

from .errors import AssemblyError, ConfigError, DecodeError, GeometryError

MIN_TILE_SIZE = 32
DEFAULT_TILE_SIZE = 256

# Slack on the preimage bounds test; absorbs round-off from inverting H.
_BOUNDS_TOL = 1e-6


@dataclass(frozen=True, eq=False)
class Raster:
    """Immutable 8-bit image, stored as a read-only ``(height, width, channels)`` array."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim == 2:
            a = a[:, :, None]
        if a.ndim != 3 or a.shape[2] not in (1, 3):
            raise ValueError(f"raster must have 1 or 3 channels, got shape {a.shape}")
        if a.shape[0] < 1 or a.shape[1] < 1:
            raise ValueError(f"raster must be at least 1x1, got {a.shape[1]}x{a.shape[0]}")
        if a.dtype != np.uint8:
            if np.issubdtype(a.dtype, np.floating) or a.min() < 0 or a.max() > 255:
                raise ValueError(f"raster samples must be uint8, got {a.dtype}")
            a = a.astype(np.uint8)
        a = np.array(a, dtype=np.uint8, order="C", copy=True)
        a.flags.writeable = False
        object.__setattr__(self, "data", a)

    @classmethod
    def from_array(cls, a) -> "Raster":
        return cls(np.asarray(a))

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "Raster":
        return cls(np.zeros((height, width, channels), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> Tuple[int, int]:
        """``(height, width)``."""
        return self.data.shape[:2]

    @property
    def plane(self) -> np.ndarray:
        """2-D view for single-channel rasters, the full array otherwise."""
        return self.data[:, :, 0] if self.channels == 1 else self.data

    def gray(self) -> np.ndarray:
        """Float64 luminance (BT.601 weights for colour input)."""
        if self.channels == 1:
            return self.data[:, :, 0].astype(np.float64)
        d = self.data.astype(np.float64)
        return 0.299 * d[:, :, 0] + 0.587 * d[:, :, 1] + 0.114 * d[:, :, 2]

    def tobytes(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __repr__(self):
        return f"Raster({self.width}x{self.height}x{self.channels})"


@dataclass(frozen=True)
class Tile:
    origin_x: int
    origin_y: int
    payload: Raster


@dataclass(frozen=True)
class GridLayout:
    tile_size: int
    cols: int
    rows: int
    parent_width: int
    parent_height: int

    @classmethod
    def for_size(cls, width: int, height: int, tile_size: int) -> "GridLayout":
        return cls(tile_size, math.ceil(width / tile_size), math.ceil(height / tile_size), width, height)

    def origins(self) -> List[Tuple[int, int]]:
        """Tile origins in row-major order."""
        s = self.tile_size
        return [(c * s, r * s) for r in range(self.rows) for c in range(self.cols)]

    def tile_shape(self, origin_x: int, origin_y: int) -> Tuple[int, int]:
        """``(height, width)`` of the tile at an origin, clipped at the right/bottom edge."""
        return (min(self.tile_size, self.parent_height - origin_y),
                min(self.tile_size, self.parent_width - origin_x))


# --------------------------------------------------------------------------
# File I/O
# --------------------------------------------------------------------------

def _read_pnm_token(buf: bytes, pos: int) -> Tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DecodeError("truncated NetPBM header")
    return buf[start:pos], pos


def _decode_pnm(buf: bytes, name: str) -> Raster:
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"{name}: unsupported NetPBM variant {magic!r} (only binary P5/P6)")
    pos = 2
    fields = []
    for _ in range(3):
        tok, pos = _read_pnm_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise DecodeError(f"{name}: malformed NetPBM header field {tok!r}") from None
    width, height, maxval = fields
    if width < 1 or height < 1:
        raise DecodeError(f"{name}: invalid dimensions {width}x{height}")
    if maxval < 1 or maxval > 255:
        raise DecodeError(f"{name}: unsupported bit depth (maxval {maxval}, need <= 255)")
    pos += 1  # single whitespace byte before the raster
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    body = buf[pos:pos + need]
    if len(body) < need:
        raise DecodeError(
            f"{name}: truncated pixel data (header {width}x{height}x{channels} needs {need} bytes, "
            f"found {len(body)})")
    arr = np.frombuffer(body, dtype=np.uint8).reshape(height, width, channels)
    return Raster(arr)


def load_raster(path) -> Raster:
    """Decode an 8-bit PNG or a binary NetPBM (P5/P6) file.

    Raises
    ------
    DecodeError
        If the file cannot be read, is truncated, or has an unsupported
        format, bit depth or channel layout.
    """
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DecodeError(f"{path}: unreadable ({exc.strerror or exc})") from exc
    if buf[:2] in (b"P1", b"P2", b"P3", b"P4", b"P5", b"P6", b"P7"):
        return _decode_pnm(buf, str(path))
    if not buf.startswith(b"\x89PNG\r\n\x1a\n"):
        raise DecodeError(f"{path}: unsupported format (expected PNG or NetPBM P5/P6)")
    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode == "P":
                im = im.convert("RGBA" if "transparency" in im.info else "RGB")
                mode = im.mode
            if mode == "L":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "RGB":
                arr = np.asarray(im, dtype=np.uint8)
            elif mode in ("1", "I", "I;16", "I;16B", "I;16L", "F"):
                raise DecodeError(f"{path}: unsupported bit depth (PNG mode {mode}, need 8-bit)")
            else:
                raise DecodeError(f"{path}: unsupported channel layout (PNG mode {mode}, need L or RGB)")
    except DecodeError:
        raise
    except Exception as exc:  # Pillow raises a zoo of types for corrupt files
        raise DecodeError(f"{path}: corrupt PNG ({exc})") from exc
    return Raster(arr)


def save_raster(r: Raster, path) -> None:
    """Write ``r`` as PNG or NetPBM depending on the suffix."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix in (".pgm", ".ppm", ".pnm"):
        magic = b"P5" if r.channels == 1 else b"P6"
        path.write_bytes(magic + f"\n{r.width} {r.height}\n255\n".encode() + r.tobytes())
    elif suffix == ".png":
        Image.fromarray(r.plane, mode="L" if r.channels == 1 else "RGB").save(path, format="PNG")
    else:
        raise ConfigError(f"unsupported output format {suffix!r}")


def mask_from_bool(m: np.ndarray) -> Raster:
    """0/255 single-channel raster from a boolean array."""
    return Raster(np.where(m, 255, 0).astype(np.uint8))


# --------------------------------------------------------------------------
# Warping
# --------------------------------------------------------------------------

def _as_matrix(h) -> np.ndarray:
    m = np.asarray(getattr(h, "m", h), dtype=np.float64)
    if m.shape != (3, 3) or not np.all(np.isfinite(m)):
        raise GeometryError("homography must be a finite 3x3 matrix")
    return m


def _bilinear(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W, C float) at in-bounds coordinates ``sx``, ``sy``."""
    h, w = img.shape[:2]
    x0 = np.clip(np.floor(sx).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(sy).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0)[:, None]
    fy = (sy - y0)[:, None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def warp_raster(src: Raster, h, out_width: int, out_height: int) -> Tuple[Raster, Raster]:
    """Resample ``src`` into a frame where ``h`` maps src pixels to output pixels.

    Every output pixel is sampled bilinearly at ``H^-1 (x, y, 1)``. Samples that
    fall outside ``[0, w-1] x [0, h-1]`` are written as 0 and flagged in the
    returned validity mask (255 valid, 0 invalid).
    """
    m = _as_matrix(h)
    if abs(np.linalg.det(m)) <= 1e-12 * max(1.0, np.abs(m).max() ** 3):
        raise GeometryError("cannot warp with a singular homography")
    inv = np.linalg.inv(m)

    ys, xs = np.mgrid[0:out_height, 0:out_width]
    pts = np.stack([xs.ravel(), ys.ravel(), np.ones(xs.size)]).astype(np.float64)
    u, v, w = inv @ pts
    with np.errstate(divide="ignore", invalid="ignore"):
        ok_w = np.abs(w) > 1e-12
        sx = np.where(ok_w, u / np.where(ok_w, w, 1.0), -1.0)
        sy = np.where(ok_w, v / np.where(ok_w, w, 1.0), -1.0)
    valid = (ok_w & (sx >= -_BOUNDS_TOL) & (sx <= src.width - 1 + _BOUNDS_TOL)
             & (sy >= -_BOUNDS_TOL) & (sy <= src.height - 1 + _BOUNDS_TOL))

    out = np.zeros((out_height * out_width, src.channels), dtype=np.uint8)
    if valid.any():
        cx = np.clip(sx[valid], 0, src.width - 1)
        cy = np.clip(sy[valid], 0, src.height - 1)
        vals = _bilinear(src.data.astype(np.float64), cx, cy)
        out[valid] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)

    out = out.reshape(out_height, out_width, src.channels)
    return Raster(out), mask_from_bool(valid.reshape(out_height, out_width))


# --------------------------------------------------------------------------
# Tiling
# --------------------------------------------------------------------------

def partition(img: Raster, tile_size: int = DEFAULT_TILE_SIZE) -> Tuple[List[Tile], GridLayout]:
    """Cut ``img`` into non-overlapping tiles; edge tiles keep their true size."""
    if tile_size < MIN_TILE_SIZE:
        raise ConfigError(f"tile_size must be >= {MIN_TILE_SIZE}, got {tile_size}")
    layout = GridLayout.for_size(img.width, img.height, tile_size)
    tiles = []
    for ox, oy in layout.origins():
        th, tw = layout.tile_shape(ox, oy)
        tiles.append(Tile(ox, oy, Raster(img.data[oy:oy + th, ox:ox + tw])))
    return tiles, layout


def assemble(tiles: Sequence[Tuple[int, int, np.ndarray]], layout: GridLayout) -> np.ndarray:
    """Place ``(origin_x, origin_y, array)`` blocks into a parent array.

    Shared by :func:`stitch` and the float probability maps of change detection.
    """
    expected = set(layout.origins())
    seen = {}
    for ox, oy, arr in tiles:
        if (ox, oy) not in expected:
            raise AssemblyError(f"tile origin ({ox},{oy}) is not on the {layout.tile_size}px grid")
        if (ox, oy) in seen:
            raise AssemblyError(f"duplicate tile origin ({ox},{oy})")
        th, tw = layout.tile_shape(ox, oy)
        if arr.shape[:2] != (th, tw):
            raise AssemblyError(
                f"tile at ({ox},{oy}) is {arr.shape[1]}x{arr.shape[0]}, expected {tw}x{th}")
        seen[(ox, oy)] = arr
    missing = sorted(expected - set(seen), key=lambda o: (o[1], o[0]))
    if missing:
        listed = ", ".join(f"({x},{y})" for x, y in missing)
        raise AssemblyError(f"missing tile origin(s): {listed}")

    first = next(iter(seen.values()))
    out = np.zeros((layout.parent_height, layout.parent_width) + first.shape[2:], dtype=first.dtype)
    for (ox, oy), arr in seen.items():
        out[oy:oy + arr.shape[0], ox:ox + arr.shape[1]] = arr
    return out


def stitch(tiles: Sequence[Tile], layout: GridLayout) -> Raster:
    """Inverse of :func:`partition`."""
    channels = {t.payload.channels for t in tiles}
    if len(channels) > 1:
        raise AssemblyError(f"tiles mix channel counts {sorted(channels)}")
    return Raster(assemble([(t.origin_x, t.origin_y, t.payload.data) for t in tiles], layout))
