"""Assembly of the 101-channel model input for one prediction request.

For a request (city, day D, time T, subtask) the stack is laid out as:

* channels 0..35   — lag planes: frames T-1 .. T-12 of day D, three channels
  (volume, speed, heading) per lag;
* channels 36..83  — periodic planes: the 16 days {D-14} u [D-7, D-1] u
  [D+1, D+7] u {D+14} in ascending offset order, three channels per day, each
  smoothed by a centred moving window (default width 13) at time T;
* channels 84..98  — statistical planes: five causal period averages over
  the last 12 / 36 / 72 / 144 frames and the whole day so far, three channels
  per period;
* channel 99       — month-block average of frame T for the target subtask;
* channel 100      — week-block average of frame T for the target subtask.

Every channel is bytes / 255, so values lie in [0, 1]. The manifest records,
per channel, the resolved provenance (family, actual day offset, time or
period reference, source subtask); re-deriving each channel from its manifest
line reproduces the stack bit for bit.

Requests are pure functions of (archive, request, config) and may be
assembled in parallel against a shared read-only archive.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InsufficientHistoryError,
    InvalidConfigError,
    InvalidInputError,
    NotFoundError,
)
from .movies import (
    FRAMES_PER_DAY,
    SUBTASKS,
    Movie,
    MovieArchive,
    check_subtask,
    check_time_index,
    read_grid_tensor,
    round_half_away,
    write_grid_tensor,
)

NUM_FEATURE_CHANNELS = 101
NUM_LAGS = 12
PERIODIC_OFFSETS = (-14, -7, -6, -5, -4, -3, -2, -1, 1, 2, 3, 4, 5, 6, 7, 14)

# Causal multiscale windows: 1 h, 3 h, 6 h, 12 h and the day so far.
PERIOD_IDS = ("avg12", "avg36", "avg72", "avg144", "avgday")
_PERIOD_SPAN = {"avg12": 12, "avg36": 36, "avg72": 72, "avg144": 144, "avgday": None}

FAMILY_LAG = "lag"
FAMILY_PERIODIC = "periodic"
FAMILY_STAT = "stat"
FAMILY_CALENDAR = "calendar"

WEEK_BLOCK_DAYS = 7
MONTH_BLOCK_DAYS = 30

MANIFEST_SUFFIX = ".manifest.tsv"


@dataclass(frozen=True)
class FeatureRequest:
    """What to predict: (city, day D, time T, subtask), horizon frames ahead."""

    city: str
    day: int
    time: int
    subtask: str
    horizon: int = 3

    def __post_init__(self) -> None:
        check_time_index(self.time)
        check_subtask(self.subtask)
        if self.day < 0:
            raise InvalidInputError(f"day index must be >= 0, got {self.day}")
        if self.horizon < 1:
            raise InvalidInputError(f"horizon must be >= 1, got {self.horizon}")


@dataclass(frozen=True)
class SmoothingConfig:
    """Moving-window width for periodic channels, plus the lag fallback switch.

    ``prev_day_fallback`` lets requests with T < 12 borrow the tail frames of
    day D-1 for the lag channels; without it such requests are rejected.
    """

    window: int = 13
    prev_day_fallback: bool = False

    def __post_init__(self) -> None:
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidConfigError(f"smoothing window must be odd and >= 1, got {self.window}")


@dataclass(frozen=True)
class ChannelSpec:
    """Resolved provenance of one stack channel (one manifest line)."""

    index: int
    family: str
    day_offset: int | None  # actual day offset used; None marks a zero-filled plane
    time_ref: str  # frame index (lag), centre time (periodic), period id (stat), span (calendar)
    subtask: str


@dataclass(frozen=True)
class FeatureStack:
    """The assembled (101, H, W) input in [0, 1] plus its channel manifest."""

    channels: np.ndarray
    manifest: tuple[ChannelSpec, ...]
    request: FeatureRequest
    window: int

    def __post_init__(self) -> None:
        if self.channels.ndim != 3 or self.channels.shape[0] != NUM_FEATURE_CHANNELS:
            raise InvalidInputError(
                f"feature stack must be ({NUM_FEATURE_CHANNELS}, H, W), got {self.channels.shape}"
            )
        if len(self.manifest) != self.channels.shape[0]:
            raise InvalidInputError("manifest length must equal channel count")


def _plane(movie: Movie, subtask: str, time: int) -> np.ndarray:
    return movie.plane(subtask)[time].astype(np.float64) / 255.0


def moving_window_smooth(movie: Movie, subtask: str, time: int, window: int) -> np.ndarray:
    """Mean of the subtask plane over frames [T-(w-1)/2, T+(w-1)/2], clamped.

    Frames clipped off at the day edges are simply dropped from the average
    (no padding), so the edge means use fewer frames.
    """
    check_time_index(time)
    if window < 1 or window % 2 == 0:
        raise InvalidConfigError(f"window must be odd and >= 1, got {window}")
    half = (window - 1) // 2
    lo = max(0, time - half)
    hi = min(FRAMES_PER_DAY - 1, time + half)
    frames = movie.plane(subtask)[lo : hi + 1].astype(np.float64)
    return frames.mean(axis=0) / 255.0


def period_average(movie: Movie, subtask: str, time: int, period: str) -> np.ndarray:
    """Mean of the subtask plane over one causal period, empty range -> zeros."""
    check_time_index(time)
    if period not in _PERIOD_SPAN:
        raise InvalidConfigError(f"unknown period id {period!r}; expected one of {PERIOD_IDS}")
    span = _PERIOD_SPAN[period]
    lo = 0 if span is None else max(0, time - span)
    hi = time - 1
    if hi < lo:
        return np.zeros(movie.dims.shape, dtype=np.float64)
    frames = movie.plane(subtask)[lo : hi + 1].astype(np.float64)
    return frames.mean(axis=0) / 255.0


def calendar_average(
    archive: MovieArchive, city: str, day: int, time: int, subtask: str, span: str
) -> np.ndarray:
    """Mean of frame T over the other archive days in day D's week/month block.

    Blocks are 7- and 30-day windows of the day index (the synthetic archive
    carries no calendar). Day D itself is excluded to avoid target leakage;
    if the block holds no other day the mean falls back to all other archive
    days, and an archive whose only day is D falls back to D itself.
    """
    check_time_index(time)
    if span not in ("month", "week"):
        raise InvalidConfigError(f"span must be 'month' or 'week', got {span!r}")
    block = MONTH_BLOCK_DAYS if span == "month" else WEEK_BLOCK_DAYS
    all_days = archive.days(city)
    mates = [d for d in all_days if d // block == day // block and d != day]
    if not mates:
        mates = [d for d in all_days if d != day]
    if not mates:
        mates = [day]
    acc = np.zeros(archive.movie(city, mates[0]).dims.shape, dtype=np.float64)
    for d in mates:
        acc += _plane(archive.movie(city, d), subtask, time)
    return acc / len(mates)


def _resolve_periodic_day(archive: MovieArchive, city: str, day: int, offset: int) -> int | None:
    """Day supplying a periodic channel: nominal D+offset, else the nearest
    existing day on the same side of D, else None (zero plane)."""
    want = day + offset
    if want >= 0 and archive.has(city, want):
        return want
    side = 1 if offset > 0 else -1
    candidates = [d for d in archive.days(city) if d != day and (d - day) * side > 0]
    if not candidates:
        return None
    return min(candidates, key=lambda d: (abs(d - want), d))


def assemble(archive: MovieArchive, req: FeatureRequest, cfg: SmoothingConfig) -> FeatureStack:
    """Build the 101-channel stack and its manifest for one request."""
    if req.city not in archive.cities():
        raise NotFoundError(f"city {req.city!r} not in archive at {archive.root}")
    target = archive.movie(req.city, req.day)
    height, width = target.dims.shape

    if req.time < NUM_LAGS and not cfg.prev_day_fallback:
        raise InsufficientHistoryError(
            f"time index {req.time} < {NUM_LAGS} needs the previous-day fallback"
        )
    prev: Movie | None = None
    if req.time < NUM_LAGS:
        if not archive.has(req.city, req.day - 1):
            raise InsufficientHistoryError(
                f"lag channels for T={req.time} need day {req.day - 1}, which is missing"
            )
        prev = archive.movie(req.city, req.day - 1)

    planes: list[np.ndarray] = []
    manifest: list[ChannelSpec] = []

    def put(plane: np.ndarray, family: str, day_offset: int | None, time_ref: str, subtask: str):
        manifest.append(ChannelSpec(len(planes), family, day_offset, time_ref, subtask))
        planes.append(plane)

    # Lag family: frames T-1 .. T-12 of day D (or the tail of D-1).
    for k in range(1, NUM_LAGS + 1):
        t = req.time - k
        for subtask in SUBTASKS:
            if t >= 0:
                put(_plane(target, subtask, t), FAMILY_LAG, 0, str(t), subtask)
            else:
                assert prev is not None
                put(_plane(prev, subtask, FRAMES_PER_DAY + t), FAMILY_LAG, -1,
                    str(FRAMES_PER_DAY + t), subtask)

    # Periodic family: 16 surrounding days, smoothed at the same time index.
    for offset in PERIODIC_OFFSETS:
        actual = _resolve_periodic_day(archive, req.city, req.day, offset)
        for subtask in SUBTASKS:
            if actual is None:
                put(np.zeros((height, width)), FAMILY_PERIODIC, None, str(req.time), subtask)
            else:
                plane = moving_window_smooth(
                    archive.movie(req.city, actual), subtask, req.time, cfg.window
                )
                put(plane, FAMILY_PERIODIC, actual - req.day, str(req.time), subtask)

    # Statistical family: five causal period averages on day D.
    for period in PERIOD_IDS:
        for subtask in SUBTASKS:
            put(period_average(target, subtask, req.time, period), FAMILY_STAT, 0, period, subtask)

    # Calendar family: month/week block averages for the target subtask.
    for span in ("month", "week"):
        put(
            calendar_average(archive, req.city, req.day, req.time, req.subtask, span),
            FAMILY_CALENDAR, 0, span, req.subtask,
        )

    channels = np.stack(planes)
    return FeatureStack(channels=channels, manifest=tuple(manifest), request=req, window=cfg.window)


def derive_channel(
    archive: MovieArchive, req: FeatureRequest, cfg: SmoothingConfig, spec: ChannelSpec
) -> np.ndarray:
    """Recompute one channel from its manifest line; audits manifest exactness."""
    if spec.family == FAMILY_LAG:
        movie = archive.movie(req.city, req.day + (spec.day_offset or 0))
        return _plane(movie, spec.subtask, int(spec.time_ref))
    if spec.family == FAMILY_PERIODIC:
        if spec.day_offset is None:
            return np.zeros(archive.movie(req.city, req.day).dims.shape, dtype=np.float64)
        movie = archive.movie(req.city, req.day + spec.day_offset)
        return moving_window_smooth(movie, spec.subtask, int(spec.time_ref), cfg.window)
    if spec.family == FAMILY_STAT:
        return period_average(archive.movie(req.city, req.day), spec.subtask, req.time, spec.time_ref)
    if spec.family == FAMILY_CALENDAR:
        return calendar_average(archive, req.city, req.day, req.time, spec.subtask, spec.time_ref)
    raise InvalidInputError(f"unknown channel family {spec.family!r}")


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_stack(stack: FeatureStack, path: str | Path) -> None:
    """Write a stack in the grid-tensor format (frames=1, channels=101).

    The container holds bytes, so channel values are quantised to 1/255 steps
    (round half away from zero) on write.
    """
    quantised = round_half_away(np.clip(stack.channels, 0.0, 1.0) * 255.0).astype(np.uint8)
    write_grid_tensor(np.moveaxis(quantised, 0, -1)[None], path)


def read_stack_channels(path: str | Path) -> np.ndarray:
    """Read back a serialized stack as a (101, H, W) array in [0, 1]."""
    tensor = read_grid_tensor(path)
    if tensor.shape[0] != 1 or tensor.shape[3] != NUM_FEATURE_CHANNELS:
        raise FormatError(
            f"{path}: expected a 1-frame, {NUM_FEATURE_CHANNELS}-channel stack, got {tensor.shape}"
        )
    return np.moveaxis(tensor[0], -1, 0).astype(np.float64) / 255.0


def write_manifest(stack: FeatureStack, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    for spec in stack.manifest:
        day_offset = "none" if spec.day_offset is None else str(spec.day_offset)
        lines.append(f"{spec.index}\t{spec.family}\t{day_offset}\t{spec.time_ref}\t{spec.subtask}")
    path.write_text("\n".join(lines) + "\n")


def read_manifest(path: str | Path) -> tuple[ChannelSpec, ...]:
    specs = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        index, family, day_offset, time_ref, subtask = line.split("\t")
        specs.append(
            ChannelSpec(
                index=int(index),
                family=family,
                day_offset=None if day_offset == "none" else int(day_offset),
                time_ref=time_ref,
                subtask=subtask,
            )
        )
    return tuple(specs)
