"""Occupancy-grid environments: loading, free space and robot-eroded free space.

Conventions used across the package:

- ``free[i, j]`` is indexed (row, col) with row 0 at the *bottom* of the map,
  so world ``y`` grows with the row index. Image files (top row first) are
  flipped on load and on export.
- A world point belongs to the cell that contains it. Cell centers are the
  sample points for every integral.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage


class MapFormatError(ValueError):
    """Raised for malformed or unusable map data."""


class InfeasibleGeometryError(ValueError):
    """Raised when the geometry leaves no usable free space."""


@dataclass(frozen=True)
class Environment:
    free: np.ndarray
    resolution: float
    origin: tuple[float, float] = (0.0, 0.0)
    name: str = "map"
    _centers: np.ndarray = field(init=False, repr=False, compare=False)
    _cache: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        free = np.asarray(self.free, dtype=bool)
        if free.ndim != 2 or free.size == 0:
            raise MapFormatError("occupancy grid must be a non-empty 2-D array")
        if not self.resolution > 0:
            raise MapFormatError(f"resolution must be positive, got {self.resolution}")
        if not free.any():
            raise InfeasibleGeometryError("map has no free cells")
        free = free.copy()
        free.setflags(write=False)
        object.__setattr__(self, "free", free)
        ii, jj = np.indices(free.shape)
        centers = np.stack(
            [self.origin[0] + (jj + 0.5) * self.resolution,
             self.origin[1] + (ii + 0.5) * self.resolution],
            axis=-1,
        )
        centers.setflags(write=False)
        object.__setattr__(self, "_centers", centers)
        # derived geometry (e.g. corner visibility) computed on first use
        object.__setattr__(self, "_cache", {})

    @property
    def height(self) -> int:
        return self.free.shape[0]

    @property
    def width(self) -> int:
        return self.free.shape[1]

    @property
    def cell_area(self) -> float:
        return self.resolution**2

    @property
    def n_free(self) -> int:
        return int(self.free.sum())

    @property
    def extent(self) -> tuple[float, float]:
        """World size (x, y) in meters."""
        return self.width * self.resolution, self.height * self.resolution

    @property
    def centers(self) -> np.ndarray:
        """(H, W, 2) array of cell-center world coordinates."""
        return self._centers

    def cell_of(self, point) -> tuple[int, int]:
        x, y = point
        j = int(np.floor((x - self.origin[0]) / self.resolution))
        i = int(np.floor((y - self.origin[1]) / self.resolution))
        return i, j

    def center_of(self, cell) -> np.ndarray:
        i, j = cell
        return np.array(
            [self.origin[0] + (j + 0.5) * self.resolution,
             self.origin[1] + (i + 0.5) * self.resolution]
        )

    def in_bounds(self, cell) -> bool:
        i, j = cell
        return 0 <= i < self.height and 0 <= j < self.width

    def is_free_point(self, point) -> bool:
        cell = self.cell_of(point)
        return self.in_bounds(cell) and bool(self.free[cell])

    def nearest_free_cell(self, point, mask: np.ndarray | None = None) -> tuple[int, int]:
        """Free cell (restricted to ``mask`` if given) whose center is closest to ``point``."""
        allowed = self.free if mask is None else (mask & self.free)
        ii, jj = np.nonzero(allowed)
        if ii.size == 0:
            raise InfeasibleGeometryError("no candidate cells")
        c = self.centers[ii, jj]
        k = int(np.argmin(np.sum((c - np.asarray(point, float)) ** 2, axis=1)))
        return int(ii[k]), int(jj[k])


def _parse_pgm(data: bytes) -> np.ndarray:
    """Binary (P5) or plain (P2) PGM into a uint array, top row first."""
    tokens: list[bytes] = []
    pos = 0
    # header: magic, width, height, maxval, with '#' comments
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise MapFormatError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MapFormatError("bad PGM header") from exc
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise MapFormatError("bad PGM dimensions")
    if magic == b"P5":
        pos += 1  # single whitespace after maxval
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        count = width * height
        raw = np.frombuffer(data, dtype=dtype, count=count, offset=pos) if len(data) - pos >= count * dtype.itemsize else None
        if raw is None:
            raise MapFormatError("truncated PGM raster")
        arr = raw.reshape(height, width).astype(np.int64)
    elif magic == b"P2":
        values = data[pos:].split()
        if len(values) < width * height:
            raise MapFormatError("truncated PGM raster")
        arr = np.array([int(v) for v in values[: width * height]], dtype=np.int64).reshape(height, width)
    else:
        raise MapFormatError(f"unsupported PGM magic {magic!r}")
    return arr


def _parse_ascii(text: str) -> np.ndarray:
    rows = [ln.rstrip("\r") for ln in text.splitlines() if ln.strip()]
    if not rows:
        raise MapFormatError("empty ASCII map")
    width = len(rows[0])
    if any(len(r) != width for r in rows):
        raise MapFormatError("ragged ASCII map")
    bad = set("".join(rows)) - {".", "#"}
    if bad:
        raise MapFormatError(f"unexpected characters in ASCII map: {sorted(bad)}")
    return np.array([[c == "." for c in r] for r in rows], dtype=bool)


def load_environment(map_data: bytes | str | Path, resolution: float, threshold: int = 128,
                     name: str | None = None) -> Environment:
    """Build an environment from PGM bytes, an ASCII grid, or a path to either.

    In PGM maps, gray levels at or above ``threshold`` are free. ASCII maps use
    ``.`` for free and ``#`` for obstacle; ``threshold`` is ignored for them.
    """
    if isinstance(map_data, Path) or (isinstance(map_data, str) and "\n" not in map_data
                                      and Path(map_data).exists()):
        path = Path(map_data)
        name = name or path.stem
        map_data = path.read_bytes()
    if isinstance(map_data, str):
        map_data = map_data.encode()
    if not map_data or not map_data.strip():
        raise MapFormatError("empty map data")
    if map_data[:2] in (b"P5", b"P2"):
        gray = _parse_pgm(map_data)
        maxval = int(gray.max()) if gray.size else 0
        if not 0 <= threshold <= max(255, maxval):
            raise MapFormatError(f"threshold {threshold} outside gray range")
        free_top_first = gray >= threshold
    else:
        free_top_first = _parse_ascii(map_data.decode())
    return Environment(free=free_top_first[::-1], resolution=float(resolution), name=name or "map")


def erode_free_space(env: Environment, radius: float) -> np.ndarray:
    """Free cells whose center is farther than ``radius`` from any obstacle or the map border.

    Clearance is the center-to-center distance to the nearest obstacle cell (the
    map frame counts as a ring of obstacle cells) minus half a cell; exact for
    axis-aligned walls, slightly conservative near obstacle corners.
    ``radius == 0`` returns the free mask unchanged.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return env.free.copy()
    padded = np.pad(env.free, 1, constant_values=False)
    clearance = ndimage.distance_transform_edt(padded)[1:-1, 1:-1] * env.resolution - 0.5 * env.resolution
    eroded = env.free & (clearance > radius)
    if not eroded.any():
        raise InfeasibleGeometryError(f"erosion by {radius} m leaves no free space")
    return eroded


def write_pgm(path: Path | str, gray: np.ndarray, maxval: int = 255) -> None:
    """Write a (row 0 = bottom) gray array as binary PGM."""
    img = np.clip(np.asarray(gray)[::-1], 0, maxval).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def write_ppm(path: Path | str, rgb: np.ndarray) -> None:
    """Write a (row 0 = bottom) HxWx3 uint8 array as binary PPM."""
    img = np.clip(np.asarray(rgb)[::-1], 0, 255).astype(np.uint8)
    header = f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def environment_to_pgm_bytes(env: Environment) -> bytes:
    buf = io.BytesIO()
    img = np.where(env.free[::-1], 255, 0).astype(np.uint8)
    buf.write(f"P5\n{env.width} {env.height}\n255\n".encode())
    buf.write(img.tobytes())
    return buf.getvalue()
