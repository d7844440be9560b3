"""Five-tile region cropping and overlap-averaged stitching.

The city grid is covered by five fixed rectangles (default 299 x 299): the
four corners plus a centred tile. Per-tile predictions are merged back by
replacing every pixel with the arithmetic mean of all tiles covering it.
Heading tiles are merged in class-probability space and argmaxed afterwards;
averaging the raw byte codes would be numerically meaningless.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CoverageError, InvalidConfigError, InvalidInputError
from .movies import GridDims, HEADING_CLASS_COUNT, classes_to_heading_plane

TILE_COUNT = 5
DEFAULT_TILE = (299, 299)


@dataclass(frozen=True)
class Rect:
    """Axis-aligned pixel rectangle: top-left corner plus extent."""

    y0: int
    x0: int
    h: int
    w: int

    def __post_init__(self) -> None:
        if self.y0 < 0 or self.x0 < 0 or self.h < 1 or self.w < 1:
            raise InvalidInputError(f"degenerate rect {self}")

    def check_inside(self, dims: GridDims) -> None:
        if self.y0 + self.h > dims.height or self.x0 + self.w > dims.width:
            raise InvalidInputError(f"rect {self} exceeds grid {dims.shape}")

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.y0, self.y0 + self.h), slice(self.x0, self.x0 + self.w))


@dataclass(frozen=True)
class TileLayout:
    """Five rects over a grid, ordered top-left, top-right, bottom-left,
    bottom-right, centre."""

    dims: GridDims
    tile_h: int
    tile_w: int
    rects: tuple[Rect, ...]

    def __post_init__(self) -> None:
        if len(self.rects) != TILE_COUNT:
            raise InvalidConfigError(f"layout must hold {TILE_COUNT} rects, got {len(self.rects)}")
        for rect in self.rects:
            rect.check_inside(self.dims)

    def coverage_count(self) -> np.ndarray:
        """How many tiles cover each pixel; >= 1 everywhere for a valid plan."""
        count = np.zeros(self.dims.shape, dtype=np.int64)
        for rect in self.rects:
            count[rect.slices] += 1
        return count


def plan_layout(dims: GridDims, tile_h: int = DEFAULT_TILE[0], tile_w: int | None = None) -> TileLayout:
    """Place the four corner tiles and one centred tile over the grid.

    Full coverage needs 2 * tile >= grid on each axis; anything less would
    leave a gap between the corner tiles that the single centre tile cannot
    be guaranteed to fill.
    """
    if tile_w is None:
        tile_w = tile_h
    H, W = dims.shape
    if tile_h > H or tile_w > W:
        raise InvalidConfigError(f"tile {tile_h}x{tile_w} larger than grid {H}x{W}")
    if 2 * tile_h < H or 2 * tile_w < W:
        raise CoverageError(
            f"tile {tile_h}x{tile_w} cannot cover {H}x{W} with five tiles (needs 2*tile >= grid)"
        )
    dy, dx = H - tile_h, W - tile_w
    rects = (
        Rect(0, 0, tile_h, tile_w),
        Rect(0, dx, tile_h, tile_w),
        Rect(dy, 0, tile_h, tile_w),
        Rect(dy, dx, tile_h, tile_w),
        Rect(dy // 2, dx // 2, tile_h, tile_w),
    )
    return TileLayout(dims=dims, tile_h=tile_h, tile_w=tile_w, rects=rects)


def crop(array: np.ndarray, rect: Rect) -> np.ndarray:
    """Copy a spatial sub-array; the last two axes are (H, W). No resampling."""
    array = np.asarray(array)
    if array.ndim < 2:
        raise InvalidInputError(f"need at least 2 spatial axes, got shape {array.shape}")
    H, W = array.shape[-2:]
    rect.check_inside(GridDims(H, W))
    return array[..., rect.slices[0], rect.slices[1]].copy()


@dataclass
class StitchAccumulator:
    """Running sum/count planes for overlap-averaged stitching (single writer)."""

    total: np.ndarray
    count: np.ndarray

    @classmethod
    def for_dims(cls, dims: GridDims) -> "StitchAccumulator":
        return cls(np.zeros(dims.shape, dtype=np.float64), np.zeros(dims.shape, dtype=np.int64))

    def add(self, tile: np.ndarray, rect: Rect) -> None:
        if tile.shape != (rect.h, rect.w):
            raise InvalidInputError(f"tile shape {tile.shape} does not match rect {rect}")
        self.total[rect.slices] += tile
        self.count[rect.slices] += 1

    def result(self) -> np.ndarray:
        if (self.count == 0).any():
            raise InvalidInputError("stitch accumulator has uncovered pixels")
        return self.total / self.count


def stitch(tiles, layout: TileLayout) -> np.ndarray:
    """Merge per-tile planes into one grid plane, averaging overlaps."""
    tiles = list(tiles)
    if len(tiles) != len(layout.rects):
        raise InvalidInputError(f"expected {len(layout.rects)} tiles, got {len(tiles)}")
    acc = StitchAccumulator.for_dims(layout.dims)
    for tile, rect in zip(tiles, layout.rects):
        acc.add(np.asarray(tile, dtype=np.float64), rect)
    return acc.result()


def stitch_heading(tiles, layout: TileLayout) -> np.ndarray:
    """Merge per-tile class-probability maps (5, h, w) into one byte plane.

    Probabilities are averaged over the covering tiles, then argmaxed per
    pixel (ties break to the lowest class index) and mapped to heading bytes.
    """
    tiles = list(tiles)
    if len(tiles) != len(layout.rects):
        raise InvalidInputError(f"expected {len(layout.rects)} tiles, got {len(tiles)}")
    H, W = layout.dims.shape
    total = np.zeros((HEADING_CLASS_COUNT, H, W), dtype=np.float64)
    count = np.zeros((H, W), dtype=np.int64)
    for tile, rect in zip(tiles, layout.rects):
        tile = np.asarray(tile, dtype=np.float64)
        if tile.shape != (HEADING_CLASS_COUNT, rect.h, rect.w):
            raise InvalidInputError(
                f"heading tile must be ({HEADING_CLASS_COUNT}, {rect.h}, {rect.w}), got {tile.shape}"
            )
        if not np.isfinite(tile).all():
            raise InvalidInputError("heading tile holds non-finite probabilities")
        total[:, rect.slices[0], rect.slices[1]] += tile
        count[rect.slices] += 1
    if (count == 0).any():
        raise InvalidInputError("layout leaves uncovered pixels")
    mean = total / count
    classes = mean.argmax(axis=0)  # np.argmax takes the first max: lowest class wins ties
    return classes_to_heading_plane(classes)


# ---------------------------------------------------------------------------
# Layout text format
# ---------------------------------------------------------------------------

def write_layout(layout: TileLayout, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{i}\t{r.y0}\t{r.x0}\t{r.h}\t{r.w}" for i, r in enumerate(layout.rects)]
    path.write_text("\n".join(lines) + "\n")


def read_layout(path: str | Path, dims: GridDims) -> TileLayout:
    rects = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        _, y0, x0, h, w = (int(v) for v in line.split("\t"))
        rects.append(Rect(y0, x0, h, w))
    if not rects:
        raise InvalidInputError(f"{path}: no rects in layout file")
    return TileLayout(dims=dims, tile_h=rects[0].h, tile_w=rects[0].w, rects=tuple(rects))
