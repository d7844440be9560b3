"""Multi-phase training over the per-(city, subtask, subregion) model registry.

The procedure, per city: (1) train a heading model from scratch on subregion
0; (2) seed every other (subtask, subregion) model from those body weights
and fine-tune; (3) polish all fifteen city models with a lower learning rate,
a smaller data fraction, and flip augmentation. Three cities yield the full
45-model registry.

Augmentation is geometric flipping with heading-aware relabelling: mirrored
roads point the other way, so heading codes in flipped planes are swapped
(NW<->NE and SW<->SE under a horizontal flip, NW<->SW and NE<->SE under a
vertical one). Volume and speed values are left untouched.

Online fine-tuning ranks candidate days by a weighted L1 distance over day
index and optional caller-supplied external features (weather, holidays);
with time-only weights the ranking is plain recency and the procedure
degrades to online learning on the most recent days.

Models for distinct registry keys are independent and may train in parallel
against the shared read-only archive; each loop is single-threaded over its
own model.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from . import losses
from .errors import (
    DataError,
    InvalidConfigError,
    InvalidInputError,
    NotFoundError,
    NumericError,
)
from .features import FeatureRequest, SmoothingConfig, assemble
from .movies import (
    FRAMES_PER_DAY,
    SUBTASK_CHANNEL,
    SUBTASKS,
    MovieArchive,
    heading_plane_to_classes,
    round_half_away,
)
from .network import (
    CHECKPOINT_SUFFIX,
    HEAD_HEADING,
    HEAD_REGRESSION,
    NetConfig,
    OptimizerState,
    UNetModel,
    apply_update,
    backward,
    compute_mask,
    forward,
    forward_cached,
    init_model,
    load_model,
    save_model,
    transfer_body,
)
from .tiling import Rect, TileLayout, crop, stitch, stitch_heading

PHASE_SCRATCH = "scratch"
PHASE_FINETUNE_TASK = "finetune_task"
PHASE_FINETUNE_POLISH = "finetune_polish"
PHASE_KINDS = (PHASE_SCRATCH, PHASE_FINETUNE_TASK, PHASE_FINETUNE_POLISH)

AUGMENT_OPS = ("identity", "hflip", "vflip", "hvflip")
_FLIP_SWAPS = {
    "identity": (),
    "hflip": ((1, 85), (170, 255)),   # east-west mirror: NW<->NE, SW<->SE
    "vflip": ((1, 170), (85, 255)),   # north-south mirror: NW<->SW, NE<->SE
    "hvflip": ((1, 255), (85, 170)),  # both: NW<->SE, NE<->SW
}

MAX_CITIES = 3
MAX_SUBREGIONS = 5
MAX_REGISTRY_ENTRIES = MAX_CITIES * len(SUBTASKS) * MAX_SUBREGIONS  # 45

LogFn = Callable[[int, str, float], None]


@dataclass(frozen=True)
class PhaseConfig:
    kind: str
    lr: float
    epochs: int = 1
    fraction: float = 1.0
    augment: bool = False

    def __post_init__(self) -> None:
        if self.kind not in PHASE_KINDS:
            raise InvalidConfigError(f"phase kind must be one of {PHASE_KINDS}, got {self.kind!r}")
        if self.lr <= 0 or self.epochs < 1 or not 0 < self.fraction <= 1:
            raise InvalidConfigError(f"degenerate phase config {self}")
        if self.kind == PHASE_SCRATCH and (self.augment or self.fraction != 1.0):
            raise InvalidConfigError("scratch phase must use the full data and no augmentation")
        if self.kind == PHASE_FINETUNE_POLISH and not self.augment:
            raise InvalidConfigError("polish phase must enable augmentation")


def default_phases() -> tuple[PhaseConfig, PhaseConfig, PhaseConfig]:
    return (
        PhaseConfig(PHASE_SCRATCH, lr=1e-3, epochs=1, fraction=1.0, augment=False),
        PhaseConfig(PHASE_FINETUNE_TASK, lr=1e-3, epochs=1, fraction=1.0, augment=False),
        PhaseConfig(PHASE_FINETUNE_POLISH, lr=1e-4, epochs=1, fraction=0.5, augment=True),
    )


def validate_phases(phases) -> tuple[PhaseConfig, PhaseConfig, PhaseConfig]:
    """The schedule must run scratch -> finetune_task -> finetune_polish with a
    strictly lower polish learning rate and a non-increasing data fraction."""
    phases = tuple(phases)
    if tuple(p.kind for p in phases) != PHASE_KINDS:
        raise InvalidConfigError(f"phases must be {PHASE_KINDS} in order, got {[p.kind for p in phases]}")
    scratch, task, polish = phases
    if polish.lr >= task.lr:
        raise InvalidConfigError(
            f"polish lr {polish.lr} must be strictly below finetune_task lr {task.lr}"
        )
    if polish.fraction > task.fraction:
        raise InvalidConfigError(
            f"polish data fraction {polish.fraction} must not exceed finetune_task's {task.fraction}"
        )
    return scratch, task, polish


@dataclass(frozen=True)
class TrainSettings:
    """Desk-scale knobs around the phase schedule."""

    net: NetConfig
    seed: int = 0
    batch_size: int = 4
    batches_per_epoch: int = 2
    horizon: int = 3
    smoothing: SmoothingConfig = SmoothingConfig()
    weights: losses.LossWeights = losses.LossWeights()
    optimizer: str = "adam"


# ---------------------------------------------------------------------------
# Registry
# ---------------------------------------------------------------------------

class ModelRegistry:
    """Checkpoints keyed by (city, subtask, subregion) under one root.

    Capped at 3 cities x 3 subtasks x 5 subregions = 45 entries; writes for
    one key must not race (each key is owned by a single training loop).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._keys: set[tuple[str, str, int]] = set()
        if self.root.exists():
            for path in self.root.glob(f"*/*/*{CHECKPOINT_SUFFIX}"):
                city, subtask = path.parent.parent.name, path.parent.name
                try:
                    self._keys.add(self._check_key(city, subtask, int(path.stem)))
                except (ValueError, InvalidInputError):
                    continue

    def _check_key(self, city: str, subtask: str, subregion: int) -> tuple[str, str, int]:
        if subtask not in SUBTASKS:
            raise InvalidInputError(f"unknown subtask {subtask!r}")
        if not 0 <= subregion < MAX_SUBREGIONS:
            raise InvalidInputError(f"subregion {subregion} outside [0, {MAX_SUBREGIONS - 1}]")
        cities = {k[0] for k in self._keys} | {city}
        if len(cities) > MAX_CITIES:
            raise InvalidConfigError(f"registry is capped at {MAX_CITIES} cities, got {sorted(cities)}")
        return (city, subtask, subregion)

    def path(self, city: str, subtask: str, subregion: int) -> Path:
        return self.root / city / subtask / f"{subregion}{CHECKPOINT_SUFFIX}"

    def keys(self) -> list[tuple[str, str, int]]:
        return sorted(self._keys)

    def __len__(self) -> int:
        return len(self._keys)

    def has(self, city: str, subtask: str, subregion: int) -> bool:
        return (city, subtask, subregion) in self._keys

    def save(self, city: str, subtask: str, subregion: int, model: UNetModel) -> Path:
        key = self._check_key(city, subtask, subregion)
        path = self.path(*key)
        save_model(model, path)
        self._keys.add(key)
        return path

    def load(self, city: str, subtask: str, subregion: int) -> UNetModel:
        if not self.has(city, subtask, subregion):
            raise NotFoundError(
                f"registry at {self.root} has no model for "
                f"(city={city!r}, subtask={subtask!r}, subregion={subregion})"
            )
        return load_model(self.path(city, subtask, subregion))


# ---------------------------------------------------------------------------
# Samples, batches, augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainSample:
    """One cropped training example: inputs, mask, and byte targets."""

    city: str
    day: int
    time: int
    subtask: str
    rect: Rect
    stack: np.ndarray            # (101, h, w) float in [0, 1]
    mask: np.ndarray             # (h, w) binary
    target: np.ndarray           # (horizon, h, w) uint8 truth bytes
    channel_subtasks: tuple[str, ...]


def seeded_sampler(days, seed, horizon: int = 3, t_min: int = 12) -> Iterator[tuple[int, int]]:
    """Endless deterministic stream of valid (day, time) proposals."""
    days = sorted(days)
    if not days:
        raise InvalidInputError("sampler needs at least one day")
    t_max = FRAMES_PER_DAY - horizon
    rng = np.random.default_rng(seed)
    while True:
        yield int(rng.choice(days)), int(rng.integers(t_min, t_max + 1))


def make_batch(
    archive: MovieArchive,
    city: str,
    rect: Rect,
    subtask: str,
    sampler: Iterator[tuple[int, int]],
    batch_size: int,
    *,
    horizon: int = 3,
    smoothing: SmoothingConfig = SmoothingConfig(),
) -> list[TrainSample]:
    """Draw samples from the sampler; proposals whose target frames would run
    past the end of the day are skipped, never raised."""
    samples: list[TrainSample] = []
    while len(samples) < batch_size:
        day, time = next(sampler)
        if time + horizon > FRAMES_PER_DAY:
            continue
        stack = assemble(archive, FeatureRequest(city, day, time, subtask, horizon), smoothing)
        tile = crop(stack.channels, rect)
        truth = archive.movie(city, day).plane(subtask)[time : time + horizon]
        target = crop(truth, rect)
        samples.append(
            TrainSample(
                city=city, day=day, time=time, subtask=subtask, rect=rect,
                stack=tile, mask=compute_mask(tile), target=target,
                channel_subtasks=tuple(s.subtask for s in stack.manifest),
            )
        )
    return samples


def _swap_code_values(plane: np.ndarray, swaps, scale: float) -> np.ndarray:
    out = plane.copy()
    for a, b in swaps:
        mask_a = plane == a * scale
        mask_b = plane == b * scale
        out[mask_a] = b * scale
        out[mask_b] = a * scale
    return out


def augment(sample: TrainSample, op: str) -> TrainSample:
    """Flip a sample geometrically, relabelling heading codes consistently.

    The relabelling is value-wise: pixels of heading-sourced channels whose
    value is exactly a legal code (scaled 1/255 in the inputs, raw bytes in
    the targets) are swapped; smoothed mixtures have no class identity and
    pass through unchanged.
    """
    if op not in AUGMENT_OPS:
        raise InvalidInputError(f"augment op must be one of {AUGMENT_OPS}, got {op!r}")
    if op == "identity":
        return sample
    axes = {"hflip": (-1,), "vflip": (-2,), "hvflip": (-2, -1)}[op]
    swaps = _FLIP_SWAPS[op]

    stack = np.flip(sample.stack, axis=axes).copy()
    for i, src in enumerate(sample.channel_subtasks):
        if src == "heading":
            stack[i] = _swap_code_values(stack[i], swaps, 1.0 / 255.0)
    mask = np.flip(sample.mask, axis=axes).copy()
    target = np.flip(sample.target, axis=axes).copy()
    if sample.subtask == "heading":
        target = _swap_code_values(target, swaps, 1).astype(np.uint8)
    return replace(sample, stack=stack, mask=mask, target=target)


# ---------------------------------------------------------------------------
# Loss plumbing per subtask
# ---------------------------------------------------------------------------

def sample_loss_grad(
    pred: np.ndarray, sample: TrainSample, weights: losses.LossWeights
) -> tuple[float, np.ndarray]:
    """The sample's term of the composite loss and its gradient at the output.

    Heading models contribute the weighted 5-class cross-entropy (averaged
    over horizon frames); volume/speed models contribute their weighted MAPE
    over all horizon frames.
    """
    horizon = sample.target.shape[0]
    if sample.subtask == "heading":
        logits = pred.reshape(horizon, losses.HEADING_CLASS_COUNT, *pred.shape[1:])
        classes = heading_plane_to_classes(sample.target)
        value, grad = losses.cross_entropy_heading_grad(np.moveaxis(logits, 1, 0), classes)
        w = weights.heading
        return w * value, w * np.moveaxis(grad, 0, 1).reshape(pred.shape)
    truth = sample.target.astype(np.float64) / 255.0
    value, grad = losses.mape_grad(pred, truth)
    w = weights.volume if sample.subtask == "volume" else weights.speed
    return w * value, w * grad


def train_steps(
    model: UNetModel,
    batches: Iterable[list[TrainSample]],
    phase: PhaseConfig,
    *,
    weights: losses.LossWeights = losses.LossWeights(),
    optimizer: str = "adam",
    log: LogFn | None = None,
    step_offset: int = 0,
) -> tuple[UNetModel, int]:
    """One optimizer step per mini-batch (gradient = batch mean); returns the
    model and the next step counter."""
    opt = OptimizerState(rule=optimizer, lr=phase.lr)
    step = step_offset
    for batch in batches:
        if not batch:
            raise InvalidInputError("empty mini-batch")
        total = 0.0
        grads: dict[str, np.ndarray] | None = None
        for sample in batch:
            out, cache = forward_cached(model, sample.stack, sample.mask)
            value, dpred = sample_loss_grad(out, sample, weights)
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at step {step} ({phase.kind}), sample day {sample.day}"
                )
            total += value
            g = backward(model, cache, dpred)
            if grads is None:
                grads = g
            else:
                for name in grads:
                    grads[name] += g[name]
        assert grads is not None
        for name in grads:
            grads[name] /= len(batch)
        apply_update(model, grads, opt)
        step += 1
        if log is not None:
            log(step, phase.kind, total / len(batch))
    return model, step


def _phase_batches(
    archive: MovieArchive,
    city: str,
    rect: Rect,
    subtask: str,
    phase: PhaseConfig,
    settings: TrainSettings,
    seed: int,
) -> Iterator[list[TrainSample]]:
    """Batch stream for one phase: fraction scales the per-epoch batch count,
    augmentation draws one random flip per sample."""
    n_batches = max(1, int(round_half_away(settings.batches_per_epoch * phase.fraction)))
    sampler = seeded_sampler(archive.days(city), seed, horizon=settings.horizon)
    aug_rng = np.random.default_rng([seed, 0xA06])
    for _ in range(phase.epochs):
        for _ in range(n_batches):
            batch = make_batch(
                archive, city, rect, subtask, sampler, settings.batch_size,
                horizon=settings.horizon, smoothing=settings.smoothing,
            )
            if phase.augment:
                batch = [augment(s, AUGMENT_OPS[aug_rng.integers(len(AUGMENT_OPS))]) for s in batch]
            yield batch


def _key_seed(base: int, city: str, subtask: str, subregion: int, salt: int) -> int:
    crc = zlib.crc32(f"{city}/{subtask}/{subregion}/{salt}".encode())
    return (base * 0x9E3779B1 + crc) % (2**31)


def _net_for(settings: TrainSettings, subtask: str, tile: tuple[int, int]) -> NetConfig:
    head = HEAD_HEADING if subtask == "heading" else HEAD_REGRESSION
    return replace(settings.net, head=head, horizon=settings.horizon, tile=tile)


def run_multiphase_training(
    archive: MovieArchive,
    registry: ModelRegistry,
    cities,
    layout: TileLayout,
    phases,
    settings: TrainSettings,
    *,
    log: LogFn | None = None,
    jobs: int = 1,
) -> ModelRegistry:
    """Scratch -> fine-tune -> polish over every (city, subtask, subregion).

    Each city contributes 15 checkpoints; distinct keys may train in worker
    threads (jobs > 1) without changing results, since every key's sampling
    is seeded independently.
    """
    scratch, task, polish = validate_phases(phases)
    cities = list(cities)
    for city in cities:
        if city not in archive.cities():
            raise DataError(f"archive has no data for city {city!r}")
        if len(archive.days(city)) == 0:
            raise DataError(f"archive holds no days for city {city!r}")
    tile = (layout.tile_h, layout.tile_w)

    def train_one(city: str, subtask: str, subregion: int, phase: PhaseConfig,
                  model: UNetModel, salt: int) -> UNetModel:
        rect = layout.rects[subregion]
        seed = _key_seed(settings.seed, city, subtask, subregion, salt)
        batches = _phase_batches(archive, city, rect, subtask, phase, settings, seed)
        model, _ = train_steps(model, batches, phase, weights=settings.weights,
                               optimizer=settings.optimizer, log=log)
        registry.save(city, subtask, subregion, model)
        return model

    for city in cities:
        # (1) heading model from scratch on subregion 0
        base = init_model(_net_for(settings, "heading", tile),
                          _key_seed(settings.seed, city, "heading", 0, 0))
        base = train_one(city, "heading", 0, scratch, base, salt=1)

        # (2) every other model starts from the pretrained body
        rest = [(st, sr) for st in SUBTASKS for sr in range(len(layout.rects))
                if (st, sr) != ("heading", 0)]

        def finetune_key(st_sr):
            st, sr = st_sr
            model = init_model(_net_for(settings, st, tile),
                               _key_seed(settings.seed, city, st, sr, 0))
            transfer_body(base, model)
            return train_one(city, st, sr, task, model, salt=2)

        _map_jobs(finetune_key, rest, jobs)

        # (3) polish all fifteen city models
        def polish_key(st_sr):
            st, sr = st_sr
            model = registry.load(city, st, sr)
            return train_one(city, st, sr, polish, model, salt=3)

        _map_jobs(polish_key, [(st, sr) for st in SUBTASKS for sr in range(len(layout.rects))], jobs)

    return registry


def _map_jobs(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(item) for item in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def write_training_manifest(path: str | Path, phases, settings: TrainSettings) -> None:
    """Line-oriented record of the schedule actually run."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"seed\t{settings.seed}", f"batch_size\t{settings.batch_size}",
             f"batches_per_epoch\t{settings.batches_per_epoch}", f"horizon\t{settings.horizon}",
             f"optimizer\t{settings.optimizer}", f"window\t{settings.smoothing.window}"]
    for p in phases:
        lines.append(f"phase\t{p.kind}\t{p.lr}\t{p.epochs}\t{p.fraction}\t{int(p.augment)}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Day similarity and online fine-tuning
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DaySimilarityFeatures:
    """A day's similarity coordinates: its index plus an optional external
    vector (weather, holiday flags, ...) supplied by the caller."""

    day: int
    external: tuple[float, ...] | None = None


def rank_similar_days(
    target: DaySimilarityFeatures,
    candidates,
    weights: tuple[float, float] = (1.0, 0.0),
) -> list[int]:
    """Candidate days, most similar first.

    Distance is w_time * |day - target.day| + w_ext * L1(external deltas);
    a missing external vector on either side contributes nothing. Ties break
    by smaller |day delta|, then smaller day index. With time-only weights
    this is exactly a recency ranking.
    """
    candidates = list(candidates)
    if not candidates:
        raise InvalidInputError("rank_similar_days needs at least one candidate")
    w_time, w_ext = weights
    lengths = {len(c.external) for c in candidates if c.external is not None}
    if target.external is not None:
        lengths.add(len(target.external))
    if len(lengths) > 1:
        raise InvalidInputError(f"external vectors must share one length, got {sorted(lengths)}")

    def distance(c: DaySimilarityFeatures) -> float:
        d = w_time * abs(c.day - target.day)
        if c.external is not None and target.external is not None:
            d += w_ext * float(np.abs(np.subtract(c.external, target.external)).sum())
        return d

    ranked = sorted(candidates, key=lambda c: (distance(c), abs(c.day - target.day), c.day))
    return [c.day for c in ranked]


@dataclass(frozen=True)
class OnlineFinetuneResult:
    model: UNetModel
    before_loss: float
    after_loss: float
    skipped: bool  # warning flag: no similar days were available


def online_finetune(
    model: UNetModel,
    archive: MovieArchive,
    city: str,
    subtask: str,
    rect: Rect,
    target_day: int,
    k: int,
    lr: float,
    *,
    candidates=None,
    similarity_weights: tuple[float, float] = (1.0, 0.0),
    samples_per_day: int = 2,
    val_samples: int = 2,
    horizon: int = 3,
    smoothing: SmoothingConfig = SmoothingConfig(),
    weights: losses.LossWeights = losses.LossWeights(),
    seed: int = 0,
) -> OnlineFinetuneResult:
    """One extra epoch on the k days most similar to the target day.

    Candidates default to the target day's strict past so no future frames
    leak in; callers with external feature vectors pass them explicitly.
    Validation loss is measured on held-out target-day samples before and
    after. An empty candidate pool returns the model untouched with the
    warning flag set.
    """
    if k < 1:
        raise InvalidInputError(f"neighbour count k must be >= 1, got {k}")
    if candidates is None:
        candidates = [DaySimilarityFeatures(d) for d in archive.days(city) if d < target_day]

    val_sampler = seeded_sampler([target_day], [seed, 0x7A1], horizon=horizon)
    val_batch = make_batch(archive, city, rect, subtask, val_sampler, val_samples,
                           horizon=horizon, smoothing=smoothing)

    def batch_loss(m: UNetModel) -> float:
        return sum(
            sample_loss_grad(forward(m, s.stack, s.mask), s, weights)[0] for s in val_batch
        ) / len(val_batch)

    if lr < 0:
        raise InvalidConfigError(f"learning rate must be >= 0, got {lr}")
    before = batch_loss(model)
    if not candidates:
        return OnlineFinetuneResult(model=model, before_loss=before, after_loss=before, skipped=True)
    if lr == 0:  # strict parameter no-op, but still a measured pass
        return OnlineFinetuneResult(model=model, before_loss=before, after_loss=batch_loss(model),
                                    skipped=False)

    top = rank_similar_days(DaySimilarityFeatures(target_day), candidates, similarity_weights)[:k]
    sampler = seeded_sampler(top, [seed, 0x0F1], horizon=horizon)
    epoch = [
        make_batch(archive, city, rect, subtask, sampler, samples_per_day,
                   horizon=horizon, smoothing=smoothing)
        for _ in top
    ]
    model, _ = train_steps(model, epoch, PhaseConfig(PHASE_FINETUNE_TASK, lr=lr, epochs=1),
                           weights=weights)
    return OnlineFinetuneResult(model=model, before_loss=before, after_loss=batch_loss(model),
                                skipped=False)


# ---------------------------------------------------------------------------
# Full-city prediction
# ---------------------------------------------------------------------------

def predict_city(
    registry: ModelRegistry,
    archive: MovieArchive,
    city: str,
    day: int,
    time: int,
    layout: TileLayout,
    *,
    horizon: int = 3,
    smoothing: SmoothingConfig = SmoothingConfig(),
) -> np.ndarray:
    """Assemble, run all 15 city models tile by tile, and stitch.

    Volume/speed tiles are overlap-averaged directly; heading tiles are
    softmaxed, probability-averaged, argmaxed, and re-encoded as bytes. The
    result is a (horizon, H, W, 3) uint8 frame stack whose heading bytes are
    always legal codes.
    """
    H, W = layout.dims.shape
    out = np.zeros((horizon, H, W, len(SUBTASKS)), dtype=np.uint8)
    for subtask in SUBTASKS:
        req = FeatureRequest(city, day, time, subtask, horizon)
        stack = assemble(archive, req, smoothing)
        tile_outputs = []
        for subregion, rect in enumerate(layout.rects):
            model = registry.load(city, subtask, subregion)
            tile = crop(stack.channels, rect)
            tile_outputs.append(forward(model, tile, compute_mask(tile)))
        ch = SUBTASK_CHANNEL[subtask]
        for h in range(horizon):
            if subtask == "heading":
                probs = [
                    losses.softmax_classes(
                        t.reshape(horizon, losses.HEADING_CLASS_COUNT, rect.h, rect.w)[h]
                    )
                    for t, rect in zip(tile_outputs, layout.rects)
                ]
                out[h, :, :, ch] = stitch_heading(probs, layout)
            else:
                plane = stitch([t[h] for t in tile_outputs], layout)
                out[h, :, :, ch] = round_half_away(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
    return out
