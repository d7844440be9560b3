"""Grid-movie data model: heading codec, byte scaling, binary storage, synthesis.

A movie is one city-day of traffic state: 288 frames of an H x W pixel grid,
each pixel holding three unsigned bytes (volume, speed, heading code). Byte 0
means "missing" in every channel; the store never distinguishes a true zero
from a gap. Heading codes are restricted to {0, 1, 85, 170, 255}, standing for
missing, NW, NE, SW and SE in that class order.

File format (little-endian): magic ``T4CM``, version u16 = 1, frames u16,
height u16, width u16, channels u16, reserved u16 = 0, then the raw byte
payload in frame-major, row-major, channel-last order. Archives lay movies
out as ``<root>/<city>/<day>.t4cm``.

All value types here are treated as immutable after construction; they can be
shared freely between workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InvalidConfigError,
    InvalidHeadingError,
    InvalidInputError,
    NotFoundError,
    TruncationError,
)

FRAMES_PER_DAY = 288
NUM_CHANNELS = 3

SUBTASKS = ("volume", "speed", "heading")
SUBTASK_CHANNEL = {"volume": 0, "speed": 1, "heading": 2}

# Heading class order: 0 missing, 1 NW, 2 NE, 3 SW, 4 SE.
HEADING_VALUES = (0, 1, 85, 170, 255)
HEADING_CLASS_COUNT = 5
_VALUE_TO_CLASS = {0: 0, 1: 1, 85: 2, 170: 3, 255: 4}

_LEGAL_HEADING_BYTE = np.zeros(256, dtype=bool)
_LEGAL_HEADING_BYTE[list(HEADING_VALUES)] = True

MOVIE_MAGIC = b"T4CM"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHHHHH")

MOVIE_SUFFIX = ".t4cm"


def check_subtask(subtask: str) -> str:
    if subtask not in SUBTASK_CHANNEL:
        raise InvalidInputError(f"unknown subtask {subtask!r}; expected one of {SUBTASKS}")
    return subtask


def check_time_index(time: int) -> int:
    if not 0 <= time < FRAMES_PER_DAY:
        raise InvalidInputError(f"time index {time} outside [0, {FRAMES_PER_DAY - 1}]")
    return time


def round_half_away(x):
    """Round to nearest integer, halves away from zero (the single rounding rule)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.sign(x) * np.floor(np.abs(x) + 0.5)
    if out.ndim == 0:
        return int(out)
    return out.astype(np.int64)


@dataclass(frozen=True)
class GridDims:
    """Pixel extent of the city grid. Defaults are the full-scale grid."""

    height: int = 436
    width: int = 495

    def __post_init__(self) -> None:
        if self.height < 1 or self.width < 1:
            raise InvalidInputError(f"grid dims must be >= 1, got {self.height}x{self.width}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


def _check_heading_plane(codes: np.ndarray) -> None:
    bad = ~_LEGAL_HEADING_BYTE[codes]
    if bad.any():
        value = int(codes[np.unravel_index(np.argmax(bad), codes.shape)])
        raise InvalidHeadingError(f"illegal heading byte {value}; legal codes are {HEADING_VALUES}")


@dataclass(frozen=True)
class Frame:
    """A single 5-minute snapshot: (H, W, 3) unsigned bytes."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = self.pixels
        if p.ndim != 3 or p.shape[2] != NUM_CHANNELS or p.dtype != np.uint8:
            raise InvalidInputError(f"frame pixels must be (H, W, 3) uint8, got {p.shape} {p.dtype}")
        _check_heading_plane(p[:, :, SUBTASK_CHANNEL["heading"]])

    @property
    def dims(self) -> GridDims:
        return GridDims(self.pixels.shape[0], self.pixels.shape[1])


@dataclass(frozen=True)
class Movie:
    """One city-day: exactly 288 frames stacked as a (288, H, W, 3) uint8 array."""

    city: str
    day: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = self.pixels
        if p.ndim != 4 or p.dtype != np.uint8:
            raise InvalidInputError(f"movie pixels must be 4-d uint8, got {p.shape} {p.dtype}")
        if p.shape[0] != FRAMES_PER_DAY or p.shape[3] != NUM_CHANNELS:
            raise InvalidInputError(
                f"movie must hold {FRAMES_PER_DAY} frames of 3 channels, got {p.shape}"
            )
        if self.day < 0:
            raise InvalidInputError(f"day index must be >= 0, got {self.day}")
        _check_heading_plane(p[:, :, :, SUBTASK_CHANNEL["heading"]])

    @property
    def dims(self) -> GridDims:
        return GridDims(self.pixels.shape[1], self.pixels.shape[2])

    def frame(self, time: int) -> Frame:
        check_time_index(time)
        return Frame(self.pixels[time])

    def plane(self, subtask: str) -> np.ndarray:
        """All 288 frames of one channel as a (288, H, W) uint8 view."""
        return self.pixels[:, :, :, SUBTASK_CHANNEL[check_subtask(subtask)]]


# ---------------------------------------------------------------------------
# Heading codec
# ---------------------------------------------------------------------------

def heading_value_to_class(value: int) -> int:
    """Map a heading byte {0,1,85,170,255} to its class index in [0, 4]."""
    try:
        return _VALUE_TO_CLASS[int(value)]
    except (KeyError, ValueError):
        raise InvalidHeadingError(
            f"illegal heading byte {value!r}; legal codes are {HEADING_VALUES}"
        ) from None


def class_to_heading_value(cls: int) -> int:
    """Inverse of :func:`heading_value_to_class`."""
    if not 0 <= int(cls) < HEADING_CLASS_COUNT:
        raise InvalidInputError(f"heading class {cls} outside [0, 4]")
    return HEADING_VALUES[int(cls)]


def heading_plane_to_classes(codes: np.ndarray) -> np.ndarray:
    """Vectorised byte-plane -> class-plane conversion, validating every byte."""
    codes = np.asarray(codes)
    if codes.dtype != np.uint8:
        wide = codes.astype(np.int64)
        if wide.size and (wide.min() < 0 or wide.max() > 255):
            raise InvalidHeadingError("heading bytes must lie in [0, 255]")
        codes = wide.astype(np.uint8)
    _check_heading_plane(codes)
    lut = np.zeros(256, dtype=np.int64)
    for value, cls in _VALUE_TO_CLASS.items():
        lut[value] = cls
    return lut[codes]


def classes_to_heading_plane(classes: np.ndarray) -> np.ndarray:
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() >= HEADING_CLASS_COUNT):
        raise InvalidInputError("heading classes must lie in [0, 4]")
    return np.asarray(HEADING_VALUES, dtype=np.uint8)[classes]


def _heading_bin(degree: float) -> int:
    """Class of one probe heading. Bins are (lo, hi] with 0 folded into NW."""
    if not 0 <= degree <= 359:
        raise InvalidInputError(f"heading degree {degree} outside [0, 359]")
    if degree == 0 or degree > 270:
        return 1  # NW: (270, 359] plus the 0-degree wrap
    if degree <= 90:
        return 2  # NE: (0, 90]
    if degree <= 180:
        return 4  # SE: (90, 180]
    return 3  # SW: (180, 270]


def encode_heading(probe_headings) -> int:
    """Byte code of the majority heading bin; 0 (missing) for an empty probe list.

    Ties go to the lower class index (NW < NE < SW < SE).
    """
    counts = [0] * HEADING_CLASS_COUNT
    for degree in probe_headings:
        counts[_heading_bin(float(degree))] += 1
    if sum(counts) == 0:
        return 0
    best = max(range(1, HEADING_CLASS_COUNT), key=lambda c: (counts[c], -c))
    return HEADING_VALUES[best]


def minmax_scale(raw: float, lo: float, hi: float) -> int:
    """Scale a raw reading into a byte: round(255 * (raw - lo) / (hi - lo)).

    ``raw`` is clamped into [lo, hi] first; rounding is half away from zero.
    """
    if not lo < hi:
        raise InvalidConfigError(f"min-max range requires lo < hi, got [{lo}, {hi}]")
    raw = min(max(float(raw), lo), hi)
    return int(round_half_away(255.0 * (raw - lo) / (hi - lo)))


# ---------------------------------------------------------------------------
# Binary format
# ---------------------------------------------------------------------------

def write_grid_tensor(array: np.ndarray, path: str | Path) -> None:
    """Write a (frames, H, W, channels) uint8 tensor in the movie file format."""
    a = np.ascontiguousarray(array)
    if a.ndim != 4 or a.dtype != np.uint8:
        raise InvalidInputError(f"grid tensor must be 4-d uint8, got {a.shape} {a.dtype}")
    frames, height, width, channels = a.shape
    for name, n in (("frames", frames), ("height", height), ("width", width), ("channels", channels)):
        if not 0 <= n <= 0xFFFF:
            raise InvalidInputError(f"{name}={n} does not fit the u16 header field")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = _HEADER.pack(MOVIE_MAGIC, FORMAT_VERSION, frames, height, width, channels, 0)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(a.tobytes())


def read_grid_tensor(path: str | Path) -> np.ndarray:
    """Read a tensor written by :func:`write_grid_tensor`, validating the header."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncationError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, frames, height, width, channels, reserved = _HEADER.unpack_from(raw)
    if magic != MOVIE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MOVIE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if reserved != 0:
        raise FormatError(f"{path}: reserved header field is {reserved}, expected 0")
    if height < 1 or width < 1 or channels < 1:
        raise FormatError(f"{path}: degenerate dims {frames}x{height}x{width}x{channels}")
    expect = frames * height * width * channels
    payload = raw[_HEADER.size:]
    if len(payload) < expect:
        raise TruncationError(
            f"{path}: payload holds {len(payload)} bytes but the header declares {expect}"
        )
    if len(payload) > expect:
        raise FormatError(f"{path}: {len(payload) - expect} trailing bytes after the payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(frames, height, width, channels).copy()


def write_movie(movie: Movie, path: str | Path) -> None:
    write_grid_tensor(movie.pixels, path)


def read_movie(path: str | Path, *, city: str | None = None, day: int | None = None) -> Movie:
    """Read a movie, inferring (city, day) from the archive path layout when omitted.

    Heading codes are validated on read, so a corrupt payload is rejected here.
    """
    path = Path(path)
    pixels = read_grid_tensor(path)
    if pixels.shape[0] != FRAMES_PER_DAY:
        raise FormatError(f"{path}: movie must hold {FRAMES_PER_DAY} frames, got {pixels.shape[0]}")
    if pixels.shape[3] != NUM_CHANNELS:
        raise FormatError(f"{path}: movie must hold 3 channels, got {pixels.shape[3]}")
    if city is None:
        city = path.parent.name or "unknown"
    if day is None:
        try:
            day = int(path.stem)
        except ValueError:
            day = 0
    return Movie(city=city, day=day, pixels=pixels)


# ---------------------------------------------------------------------------
# Synthetic movies
# ---------------------------------------------------------------------------

def synth_movie(
    seed: int,
    dims: GridDims = GridDims(),
    day: int = 0,
    sparsity: float = 0.3,
    city: str = "synth",
) -> Movie:
    """Deterministic synthetic city-day for desk-scale testing.

    A fixed per-seed "off-road" pixel set (a ``sparsity`` fraction of the grid)
    is all-zero in every frame; on-road pixels carry a smooth two-peak daily
    volume/speed profile with seeded noise and a persistent, occasionally
    jittering heading code drawn from the four non-missing values.
    """
    if not 0.0 <= sparsity <= 1.0:
        raise InvalidInputError(f"sparsity {sparsity} outside [0, 1]")
    height, width = dims.shape
    n_pixels = height * width

    # The off-road mask depends on the seed (and dims) only, never on the day,
    # so sparsity is structural across a whole archive.
    mask_rng = np.random.default_rng([seed, 0x0FF])
    n_off = int(round_half_away(sparsity * n_pixels))
    order = mask_rng.permutation(n_pixels)
    off_road = np.zeros(n_pixels, dtype=bool)
    off_road[order[:n_off]] = True
    off_road = off_road.reshape(height, width)
    amplitude = mask_rng.uniform(0.5, 1.5, size=(height, width)).astype(np.float32)

    day_rng = np.random.default_rng([seed, day, 0xDA7])
    t = np.arange(FRAMES_PER_DAY, dtype=np.float32)
    rush = (
        0.30
        + 0.35 * np.exp(-((t - 102.0) / 30.0) ** 2)
        + 0.30 * np.exp(-((t - 210.0) / 36.0) ** 2)
    )
    volume = amplitude[None] * rush[:, None, None]
    volume = volume + day_rng.normal(0.0, 0.04, size=volume.shape).astype(np.float32)
    speed = 0.85 - 0.5 * amplitude[None] * rush[:, None, None]
    speed = speed + day_rng.normal(0.0, 0.04, size=speed.shape).astype(np.float32)

    nonzero_codes = np.asarray(HEADING_VALUES[1:], dtype=np.uint8)
    heading = np.broadcast_to(
        day_rng.choice(nonzero_codes, size=(height, width)), (FRAMES_PER_DAY, height, width)
    ).copy()
    jitter = day_rng.random((FRAMES_PER_DAY, height, width)) < 0.05
    heading[jitter] = day_rng.choice(nonzero_codes, size=int(jitter.sum()))

    pixels = np.empty((FRAMES_PER_DAY, height, width, NUM_CHANNELS), dtype=np.uint8)
    pixels[:, :, :, 0] = round_half_away(np.clip(volume, 0.0, 1.0) * 255.0).astype(np.uint8)
    pixels[:, :, :, 1] = round_half_away(np.clip(speed, 0.0, 1.0) * 255.0).astype(np.uint8)
    pixels[:, :, :, 2] = heading
    pixels[:, off_road, :] = 0
    return Movie(city=city, day=day, pixels=pixels)


# ---------------------------------------------------------------------------
# Archive
# ---------------------------------------------------------------------------

@dataclass
class MovieArchive:
    """Disk-backed index of (city, day) -> movie file under one root directory.

    Reads are cached and validated; all movies in one archive must share dims.
    The archive itself is read-only apart from :meth:`add`, which the synthetic
    generator uses.
    """

    root: Path
    dims: GridDims | None = None
    _index: dict[str, dict[int, Path]] = field(default_factory=dict, repr=False)
    _cache: dict[tuple[str, int], Movie] = field(default_factory=dict, repr=False)

    def __init__(self, root: str | Path, dims: GridDims | None = None):
        self.root = Path(root)
        self.dims = dims
        self._index = {}
        self._cache = {}
        self.refresh()

    def refresh(self) -> None:
        self._index.clear()
        self._cache.clear()
        if not self.root.exists():
            return
        for city_dir in sorted(p for p in self.root.iterdir() if p.is_dir()):
            days: dict[int, Path] = {}
            for path in sorted(city_dir.glob(f"*{MOVIE_SUFFIX}")):
                try:
                    days[int(path.stem)] = path
                except ValueError:
                    continue
            self._index[city_dir.name] = days

    def cities(self) -> list[str]:
        return sorted(self._index)

    def days(self, city: str) -> list[int]:
        if city not in self._index:
            raise NotFoundError(f"city {city!r} not in archive at {self.root}")
        return sorted(self._index[city])

    def has(self, city: str, day: int) -> bool:
        return day in self._index.get(city, {})

    def movie_path(self, city: str, day: int) -> Path:
        return self.root / city / f"{day}{MOVIE_SUFFIX}"

    def movie(self, city: str, day: int) -> Movie:
        key = (city, day)
        if key in self._cache:
            return self._cache[key]
        if not self.has(city, day):
            raise NotFoundError(f"no movie for city={city!r} day={day} under {self.root}")
        m = read_movie(self._index[city][day], city=city, day=day)
        if self.dims is None:
            self.dims = m.dims
        elif m.dims != self.dims:
            raise FormatError(
                f"movie {city}/{day} has dims {m.dims.shape}, archive uses {self.dims.shape}"
            )
        self._cache[key] = m
        return m

    def add(self, movie: Movie) -> Path:
        if self.dims is None:
            self.dims = movie.dims
        elif movie.dims != self.dims:
            raise InvalidInputError(
                f"movie dims {movie.dims.shape} do not match archive dims {self.dims.shape}"
            )
        path = self.movie_path(movie.city, movie.day)
        write_movie(movie, path)
        self._index.setdefault(movie.city, {})[movie.day] = path
        self._cache[(movie.city, movie.day)] = movie
        return path
