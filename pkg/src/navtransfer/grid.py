"""Raster grid maps: scene rasterization, morphology, rotation, PGM I/O.

Conventions used throughout the package:

* Pixel coordinates are ``(x, y) = (column, row)`` with y growing downward.
  Arrays are indexed ``[row, column]`` (row-major).
* World coordinates put the origin at the lower-left corner of a scene with
  y growing upward, so world-to-raster conversion flips the vertical axis.
  Pixel ``(row i, col j)`` of a scene raster covers the world cell
  ``[j*res, (j+1)*res) x [(n_rows-1-i)*res, (n_rows-i)*res)``.
* Occupancy rasters use intensity 0 for free space and 255 for occupied.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class MapFormatError(ValueError):
    """Raised when a map file cannot be parsed; carries the byte offset."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        detail = message
        if path is not None:
            detail = f"{path}: {detail}"
        if offset is not None:
            detail = f"{detail} (at byte offset {offset})"
        super().__init__(detail)
        self.offset = offset


# ---------------------------------------------------------------------------
# core raster type
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridImage:
    """2D intensity raster with a metric resolution.

    ``pixels`` is a read-only uint8 array of shape ``(height, width)``.
    ``resolution`` is in meters per pixel.
    """

    pixels: np.ndarray
    resolution: float

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"pixels must be a non-empty 2D array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if not np.issubdtype(px.dtype, np.integer) and not np.issubdtype(px.dtype, np.floating):
                raise ValueError(f"unsupported pixel dtype {px.dtype}")
            if px.min() < 0 or px.max() > 255:
                raise ValueError("pixel values must lie in [0, 255]")
        if not (self.resolution > 0):
            raise ValueError(f"resolution must be > 0, got {self.resolution}")
        px = px.astype(np.uint8).copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def as_float(self) -> np.ndarray:
        """Writable float64 copy of the raster."""
        return self.pixels.astype(np.float64)


# ---------------------------------------------------------------------------
# scene geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle: center (cx, cy), full width w, full height h."""

    cx: float
    cy: float
    w: float
    h: float

    def contains(self, px, py):
        return (np.abs(px - self.cx) <= self.w / 2) & (np.abs(py - self.cy) <= self.h / 2)


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    r: float

    def contains(self, px, py):
        return (px - self.cx) ** 2 + (py - self.cy) ** 2 <= self.r**2


Obstacle = Rect | Circle


@dataclass(frozen=True)
class SceneSpec:
    """Obstacle layout for a rectangular scene.

    ``extent`` is (width, height) in meters with the origin at the lower-left
    corner.  ``bounded`` scenes have implicit walls along the extent border;
    unbounded scenes are open (used by a few test fixtures).
    """

    extent: tuple[float, float]
    obstacles: tuple[Obstacle, ...] = field(default_factory=tuple)
    bounded: bool = True

    def __post_init__(self):
        object.__setattr__(self, "extent", (float(self.extent[0]), float(self.extent[1])))
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        ew, eh = self.extent
        if not (ew > 0 and eh > 0):
            raise ValueError(f"extent dimensions must be > 0, got {self.extent}")
        for ob in self.obstacles:
            if isinstance(ob, Rect):
                inside = (
                    ob.cx - ob.w / 2 >= 0 and ob.cx + ob.w / 2 <= ew
                    and ob.cy - ob.h / 2 >= 0 and ob.cy + ob.h / 2 <= eh
                    and ob.w > 0 and ob.h > 0
                )
            elif isinstance(ob, Circle):
                inside = (
                    ob.cx - ob.r >= 0 and ob.cx + ob.r <= ew
                    and ob.cy - ob.r >= 0 and ob.cy + ob.r <= eh
                    and ob.r > 0
                )
            else:
                raise ValueError(f"unknown obstacle type {type(ob).__name__}")
            if not inside:
                raise ValueError(f"obstacle {ob} does not lie within extent {self.extent}")


def scene_to_dict(spec: SceneSpec) -> dict:
    obstacles = []
    for ob in spec.obstacles:
        if isinstance(ob, Rect):
            obstacles.append({"type": "rect", "cx": ob.cx, "cy": ob.cy, "w": ob.w, "h": ob.h})
        else:
            obstacles.append({"type": "circle", "cx": ob.cx, "cy": ob.cy, "r": ob.r})
    d = {"extent_m": [spec.extent[0], spec.extent[1]], "obstacles": obstacles}
    if not spec.bounded:
        d["bounded"] = False
    return d


def scene_from_dict(d: dict) -> SceneSpec:
    try:
        extent = tuple(float(v) for v in d["extent_m"])
        obstacles = []
        for i, ob in enumerate(d.get("obstacles", [])):
            kind = ob.get("type")
            if kind == "rect":
                obstacles.append(Rect(float(ob["cx"]), float(ob["cy"]), float(ob["w"]), float(ob["h"])))
            elif kind == "circle":
                obstacles.append(Circle(float(ob["cx"]), float(ob["cy"]), float(ob["r"])))
            else:
                raise ValueError(f"obstacle {i}: unknown type {kind!r}")
        return SceneSpec(extent, tuple(obstacles), bounded=bool(d.get("bounded", True)))
    except KeyError as e:
        raise ValueError(f"scene document missing field {e}") from e


def load_scene(path) -> SceneSpec:
    """Load a scene from a UTF-8 JSON document (schema in README)."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise MapFormatError(f"invalid scene JSON: {e.msg}", path=path, offset=e.pos) from e
    return scene_from_dict(doc)


def save_scene(spec: SceneSpec, path) -> None:
    Path(path).write_text(json.dumps(scene_to_dict(spec), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# coordinate transforms
# ---------------------------------------------------------------------------

def round_half_away(v):
    """Round to nearest integer with halves away from zero."""
    v = np.asarray(v, dtype=np.float64)
    out = np.sign(v) * np.floor(np.abs(v) + 0.5)
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


def polar_to_image(rho: float, theta: float, resolution: float, width: int, height: int) -> tuple[int, int]:
    """Convert a polar measurement in the agent frame to image pixel coordinates.

    ``x = rho*cos(theta)/resolution + width/2`` and
    ``y = -rho*sin(theta)/resolution + height/2``, rounded half away from
    zero.  The result may lie outside the raster; callers filter.
    """
    x = rho * math.cos(theta) / resolution + width / 2
    y = -rho * math.sin(theta) / resolution + height / 2
    return round_half_away(x), round_half_away(y)


def world_to_cell(wx, wy, resolution: float, n_rows: int):
    """World meters to raster (col, row) under the lower-left-origin convention."""
    col = np.floor(np.asarray(wx) / resolution).astype(np.int64)
    row = n_rows - 1 - np.floor(np.asarray(wy) / resolution).astype(np.int64)
    return col, row


# ---------------------------------------------------------------------------
# raster operations
# ---------------------------------------------------------------------------

def rasterize_scene(spec: SceneSpec, resolution: float) -> GridImage:
    """Rasterize a scene: a pixel is occupied iff its cell center lies inside
    an obstacle, plus a one-pixel wall ring for bounded scenes."""
    if not (resolution > 0):
        raise ValueError(f"resolution must be > 0, got {resolution}")
    n_cols = int(round(spec.extent[0] / resolution))
    n_rows = int(round(spec.extent[1] / resolution))
    if n_cols < 1 or n_rows < 1:
        raise ValueError(f"resolution {resolution} too coarse for extent {spec.extent}")
    occ = np.zeros((n_rows, n_cols), dtype=bool)
    cols = np.arange(n_cols)
    rows = np.arange(n_rows)
    cx = (cols + 0.5) * resolution
    cy = (n_rows - rows - 0.5) * resolution
    px, py = np.meshgrid(cx, cy)
    for ob in spec.obstacles:
        occ |= ob.contains(px, py)
    if spec.bounded:
        occ[0, :] = occ[-1, :] = True
        occ[:, 0] = occ[:, -1] = True
    return GridImage(np.where(occ, 255, 0).astype(np.uint8), resolution)


def dilate(img: GridImage, kernel_size: int) -> GridImage:
    """Morphological max-dilation with a square kernel; outside treated as 0."""
    if kernel_size < 1 or kernel_size % 2 == 0:
        raise ValueError(f"kernel_size must be odd and >= 1, got {kernel_size}")
    if kernel_size == 1:
        return GridImage(img.pixels, img.resolution)
    out = ndimage.maximum_filter(img.pixels, size=kernel_size, mode="constant", cval=0)
    return GridImage(out, img.resolution)


def rotate_image(img: GridImage, phi_deg: float, fill: int = 0) -> GridImage:
    """Rotate image content by ``phi_deg`` about the raster center.

    Nearest-neighbor sampling; source positions outside the input take
    ``fill``.  Positive angles rotate content counterclockwise as displayed
    (y-down rasters).  Multiples of 90 degrees on square rasters are exact
    pixel permutations.
    """
    h, w = img.pixels.shape
    phi = math.radians(phi_deg)
    c, s = math.cos(phi), math.sin(phi)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    xo, yo = np.meshgrid(np.arange(w) - cx, np.arange(h) - cy)
    # inverse map: source = center + R(+phi) * (output - center)
    sx = round_half_away(c * xo - s * yo + cx)
    sy = round_half_away(s * xo + c * yo + cy)
    valid = (sx >= 0) & (sx < w) & (sy >= 0) & (sy < h)
    out = np.full((h, w), fill, dtype=np.uint8)
    out[valid] = img.pixels[sy[valid], sx[valid]]
    return GridImage(out, img.resolution)


def extract_window(img: GridImage, x: int, y: int, w: int, h: int) -> GridImage:
    """Copy the w x h sub-image with top-left pixel at (x, y)."""
    if w < 1 or h < 1:
        raise ValueError(f"window dimensions must be >= 1, got {(w, h)}")
    if x < 0 or y < 0 or x + w > img.width or y + h > img.height:
        raise ValueError(
            f"window {(x, y, w, h)} not fully inside image of size "
            f"{img.width}x{img.height}"
        )
    return GridImage(img.pixels[y:y + h, x:x + w], img.resolution)


# ---------------------------------------------------------------------------
# PGM + sidecar I/O
# ---------------------------------------------------------------------------

def write_pgm(path, array: np.ndarray, maxval: int = 255) -> None:
    """Write a binary PGM (magic P5).  Samples are one byte for maxval <= 255,
    otherwise two bytes most-significant first."""
    array = np.asarray(array)
    if array.ndim != 2:
        raise ValueError("PGM payload must be 2D")
    if not (1 <= maxval <= 65535):
        raise ValueError(f"maxval must be in [1, 65535], got {maxval}")
    if array.min() < 0 or array.max() > maxval:
        raise ValueError("sample values exceed maxval")
    h, w = array.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    if maxval <= 255:
        payload = array.astype(np.uint8).tobytes()
    else:
        payload = array.astype(">u2").tobytes()
    Path(path).write_bytes(header + payload)


def _next_token(data: bytes, pos: int, path) -> tuple[bytes, int]:
    n = len(data)
    while pos < n:
        ch = data[pos:pos + 1]
        if ch == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    if pos >= n:
        raise MapFormatError("unexpected end of header", path=path, offset=pos)
    start = pos
    while pos < n and not data[pos:pos + 1].isspace():
        pos += 1
    return data[start:pos], pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (array, maxval)."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise MapFormatError(f"bad magic {data[:2]!r}, expected b'P5'", path=path, offset=0)
    pos = 2
    fields = []
    for name in ("width", "height", "maxval"):
        tok, pos = _next_token(data, pos, path)
        try:
            fields.append(int(tok))
        except ValueError:
            raise MapFormatError(f"non-integer {name} field {tok!r}", path=path, offset=pos) from None
    w, h, maxval = fields
    if w < 1 or h < 1 or not (1 <= maxval <= 65535):
        raise MapFormatError(f"bad dimensions/maxval {w}x{h}/{maxval}", path=path, offset=pos)
    pos += 1  # single whitespace byte after maxval
    itemsize = 1 if maxval <= 255 else 2
    expected = w * h * itemsize
    payload = data[pos:pos + expected]
    if len(payload) != expected:
        raise MapFormatError(
            f"truncated payload: expected {expected} bytes, got {len(payload)}",
            path=path, offset=pos,
        )
    dtype = np.uint8 if itemsize == 1 else np.dtype(">u2")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return arr.astype(np.int64) if itemsize == 2 else arr.copy(), maxval


def _meta_path(path) -> Path:
    return Path(path).with_suffix(".meta")


def write_meta(path, entries: dict) -> None:
    lines = [f"{k}={entries[k]!r}" if isinstance(entries[k], str) else f"{k}={entries[k]}" for k in entries]
    _meta_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_meta(path) -> dict:
    meta_file = _meta_path(path)
    if not meta_file.exists():
        raise MapFormatError(f"missing sidecar meta file {meta_file}", path=path)
    entries = {}
    for i, line in enumerate(meta_file.read_text(encoding="utf-8").splitlines()):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise MapFormatError(f"bad meta line {i + 1}: {line!r}", path=meta_file)
        key, _, value = line.partition("=")
        entries[key.strip()] = value.strip()
    return entries


def save_map(img: GridImage, path) -> None:
    """Write a raster as binary PGM plus a `.meta` sidecar with the resolution."""
    write_pgm(path, img.pixels, maxval=255)
    write_meta(path, {"resolution_m_per_px": repr(float(img.resolution))})


def load_map(path) -> GridImage:
    """Read a PGM + sidecar pair written by :func:`save_map`."""
    arr, maxval = read_pgm(path)
    if maxval != 255:
        raise MapFormatError(f"expected maxval 255 for map rasters, got {maxval}", path=path)
    meta = read_meta(path)
    if "resolution_m_per_px" not in meta:
        raise MapFormatError("meta file missing resolution_m_per_px", path=_meta_path(path))
    try:
        resolution = float(meta["resolution_m_per_px"])
    except ValueError:
        raise MapFormatError(
            f"bad resolution_m_per_px value {meta['resolution_m_per_px']!r}",
            path=_meta_path(path),
        ) from None
    return GridImage(arr, resolution)
