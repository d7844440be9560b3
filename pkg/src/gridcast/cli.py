"""Command-line entry point for reproducible batch runs.

Subcommands: generate, features, plan, crop, stitch, train, predict,
online-finetune, evaluate, bias-report. Every command is deterministic given
its flags and seeds, reads/writes files only, and exits with: 0 ok, 1 usage,
2 I/O, 3 data, 4 numeric failure.

Flags may be preloaded from a ``key = value`` config file (--config); flags
given on the command line override the file.
"""

from __future__ import annotations

import argparse
import sys
import zlib
from pathlib import Path

import numpy as np

from . import losses, training
from .errors import (
    DataError,
    GridcastError,
    InvalidConfigError,
    InvalidInputError,
    NumericError,
)
from .features import (
    FeatureRequest,
    SmoothingConfig,
    assemble,
    write_manifest,
    write_stack,
)
from .movies import (
    GridDims,
    MovieArchive,
    SUBTASKS,
    read_grid_tensor,
    round_half_away,
    synth_movie,
    write_grid_tensor,
)
from .network import NetConfig
from .tiling import GridDims as _TilingDims  # noqa: F401  (re-export guard)
from .tiling import Rect, plan_layout, read_layout, stitch, write_layout

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse defaults to exit(2); usage errors are 1 here
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


def _rect(text: str) -> Rect:
    try:
        y0, x0, h, w = (int(v) for v in text.split(","))
        return Rect(y0, x0, h, w)
    except (ValueError, GridcastError):
        raise argparse.ArgumentTypeError(f"expected y0,x0,h,w, got {text!r}") from None


def _load_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{path}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def build_parser() -> _Parser:
    parser = _Parser(prog="gridcast", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file providing flag defaults")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic movie archive")
    p.add_argument("--out", required=True, help="archive root directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=_dims, default=(436, 495), help="grid HxW")
    p.add_argument("--days", type=int, default=30)
    p.add_argument("--cities", default="anvil", help="comma-separated city names")
    p.add_argument("--sparsity", type=float, default=0.3)

    p = sub.add_parser("features", parents=[common], help="assemble one 101-channel stack")
    p.add_argument("--archive", required=True)
    p.add_argument("--city", required=True)
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--time", type=int, required=True)
    p.add_argument("--subtask", choices=SUBTASKS, required=True)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--window", type=int, default=13)
    p.add_argument("--prev-day-fallback", action="store_true")
    p.add_argument("--out", required=True, help="output prefix (.t4cm + .manifest.tsv)")

    p = sub.add_parser("plan", parents=[common], help="print or write the five-tile layout")
    p.add_argument("--dims", type=_dims, default=(436, 495))
    p.add_argument("--tile", type=_dims, default=(299, 299))
    p.add_argument("--out", help="write the layout file here instead of stdout")

    p = sub.add_parser("crop", parents=[common], help="crop a grid tensor file to a rect")
    p.add_argument("--input", required=True)
    p.add_argument("--rect", type=_rect, required=True, help="y0,x0,h,w")
    p.add_argument("--out", required=True)

    p = sub.add_parser("stitch", parents=[common], help="stitch 5 tile tensors back to a grid")
    p.add_argument("--layout", required=True)
    p.add_argument("--dims", type=_dims, required=True)
    p.add_argument("--tiles", nargs=5, required=True, metavar="TILE")
    p.add_argument("--out", required=True)

    p = sub.add_parser("train", parents=[common], help="run the multi-phase training procedure")
    p.add_argument("--archive", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--cities", required=True, help="comma-separated; 15 models per city")
    p.add_argument("--dims", type=_dims, default=(436, 495))
    p.add_argument("--tile", type=_dims, default=(299, 299))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--base-width", type=int, default=8)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--window", type=int, default=13)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--batches-per-epoch", type=int, default=2)
    p.add_argument("--scratch-lr", type=float, default=1e-3)
    p.add_argument("--scratch-epochs", type=int, default=1)
    p.add_argument("--task-lr", type=float, default=1e-3)
    p.add_argument("--task-epochs", type=int, default=1)
    p.add_argument("--task-fraction", type=float, default=1.0)
    p.add_argument("--polish-lr", type=float, default=1e-4)
    p.add_argument("--polish-epochs", type=int, default=1)
    p.add_argument("--polish-fraction", type=float, default=0.5)
    p.add_argument("--loss-weights", default="1,1,1", help="heading,volume,speed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads across registry keys")

    p = sub.add_parser("predict", parents=[common], help="predict horizon frames for one request")
    p.add_argument("--archive", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--city", required=True)
    p.add_argument("--day", type=int, required=True)
    p.add_argument("--time", type=int, required=True)
    p.add_argument("--dims", type=_dims, default=(436, 495))
    p.add_argument("--tile", type=_dims, default=(299, 299))
    p.add_argument("--horizon", type=int, default=3)
    p.add_argument("--window", type=int, default=13)
    p.add_argument("--out", required=True, help="prediction file (movie format, horizon frames)")

    p = sub.add_parser("online-finetune", parents=[common],
                       help="one extra epoch on the days most similar to the target day")
    p.add_argument("--archive", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--city", required=True)
    p.add_argument("--subtask", choices=SUBTASKS, required=True)
    p.add_argument("--subregion", type=int, required=True)
    p.add_argument("--dims", type=_dims, default=(436, 495))
    p.add_argument("--tile", type=_dims, default=(299, 299))
    p.add_argument("--day", type=int, required=True, help="target day")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("evaluate", parents=[common], help="score a prediction file against truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--truth-time", type=int, default=None,
                   help="slice the truth file at this frame to match the prediction length")
    p.add_argument("--out", help="write the report here instead of stdout")

    p = sub.add_parser("bias-report", parents=[common],
                       help="mean predicted heading byte per true heading code")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--truth-time", type=int, default=None)
    p.add_argument("--out", help="write the table here instead of stdout")

    return parser


def _apply_config_file(parser: _Parser, argv: list[str]) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config)
        # Re-parse with file values as defaults so explicit flags keep priority.
        defaults = {k: v for k, v in file_values.items() if hasattr(args, k)}
        unknown = set(file_values) - set(defaults)
        if unknown:
            raise InvalidConfigError(f"config keys not recognised: {sorted(unknown)}")
        fresh = build_parser()
        for action in fresh._subparsers._group_actions[0].choices.values():  # noqa: SLF001
            action.set_defaults(**defaults)
        args = fresh.parse_args(argv)
    return args


def _city_seed(seed: int, city: str) -> int:
    return (seed * 1000003 + zlib.crc32(city.encode())) % (2**31)


# ---------------------------------------------------------------------------
# Command bodies
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    dims = GridDims(*args.dims)
    cities = [c for c in args.cities.split(",") if c]
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)
    archive = MovieArchive(root, dims)
    for city in cities:
        (root / city).mkdir(parents=True, exist_ok=True)
        for day in range(args.days):
            archive.add(synth_movie(_city_seed(args.seed, city), dims, day, args.sparsity, city=city))
    print(f"archive {root}: {len(cities)} cities x {args.days} days, "
          f"grid {dims.height}x{dims.width}, sparsity {args.sparsity}, seed {args.seed}")
    return EXIT_OK


def cmd_features(args) -> int:
    archive = MovieArchive(args.archive)
    cfg = SmoothingConfig(window=args.window, prev_day_fallback=args.prev_day_fallback)
    req = FeatureRequest(args.city, args.day, args.time, args.subtask, args.horizon)
    stack = assemble(archive, req, cfg)
    out = Path(args.out)
    stack_path = out.with_suffix(".t4cm") if out.suffix != ".t4cm" else out
    write_stack(stack, stack_path)
    write_manifest(stack, stack_path.with_suffix("").with_suffix(".manifest.tsv"))
    print(f"wrote {stack_path} and its manifest ({stack.channels.shape[0]} channels)")
    return EXIT_OK


def cmd_plan(args) -> int:
    layout = plan_layout(GridDims(*args.dims), args.tile[0], args.tile[1])
    if args.out:
        write_layout(layout, args.out)
        print(f"wrote {args.out}")
    else:
        for i, r in enumerate(layout.rects):
            print(f"{i}\t{r.y0}\t{r.x0}\t{r.h}\t{r.w}")
    return EXIT_OK


def cmd_crop(args) -> int:
    tensor = read_grid_tensor(args.input)  # (frames, H, W, C)
    rect = args.rect
    rect.check_inside(GridDims(tensor.shape[1], tensor.shape[2]))
    cropped = tensor[:, rect.y0 : rect.y0 + rect.h, rect.x0 : rect.x0 + rect.w, :]
    write_grid_tensor(np.ascontiguousarray(cropped), args.out)
    print(f"wrote {args.out} {cropped.shape}")
    return EXIT_OK


def cmd_stitch(args) -> int:
    dims = GridDims(*args.dims)
    layout = read_layout(args.layout, dims)
    tiles = [read_grid_tensor(t) for t in args.tiles]
    frames, _, _, channels = tiles[0].shape
    for t in tiles:
        if t.shape[0] != frames or t.shape[3] != channels:
            raise InvalidInputError("tile files disagree on frames/channels")
    out = np.zeros((frames, dims.height, dims.width, channels), dtype=np.uint8)
    for f in range(frames):
        for c in range(channels):
            plane = stitch([t[f, :, :, c].astype(np.float64) for t in tiles], layout)
            out[f, :, :, c] = round_half_away(np.clip(plane, 0, 255)).astype(np.uint8)
    write_grid_tensor(out, args.out)
    print(f"wrote {args.out} {out.shape}")
    return EXIT_OK


def _parse_weights(text: str) -> losses.LossWeights:
    try:
        heading, volume, speed = (float(v) for v in text.split(","))
    except ValueError:
        raise InvalidConfigError(f"expected heading,volume,speed weights, got {text!r}") from None
    return losses.LossWeights(heading=heading, volume=volume, speed=speed)


def cmd_train(args) -> int:
    archive = MovieArchive(args.archive, GridDims(*args.dims))
    registry = training.ModelRegistry(args.registry)
    layout = plan_layout(GridDims(*args.dims), args.tile[0], args.tile[1])
    phases = (
        training.PhaseConfig(training.PHASE_SCRATCH, lr=args.scratch_lr,
                             epochs=args.scratch_epochs),
        training.PhaseConfig(training.PHASE_FINETUNE_TASK, lr=args.task_lr,
                             epochs=args.task_epochs, fraction=args.task_fraction),
        training.PhaseConfig(training.PHASE_FINETUNE_POLISH, lr=args.polish_lr,
                             epochs=args.polish_epochs, fraction=args.polish_fraction,
                             augment=True),
    )
    settings = training.TrainSettings(
        net=NetConfig(base_width=args.base_width, depth=args.depth, horizon=args.horizon,
                      tile=(args.tile[0], args.tile[1])),
        seed=args.seed,
        batch_size=args.batch_size,
        batches_per_epoch=args.batches_per_epoch,
        horizon=args.horizon,
        smoothing=SmoothingConfig(window=args.window),
        weights=_parse_weights(args.loss_weights),
    )
    log_path = Path(args.registry) / "train_log.tsv"
    log_path.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w") as log_file:
        def log(step: int, phase: str, loss: float) -> None:
            log_file.write(f"{step}\t{phase}\t{loss:.12g}\n")

        training.run_multiphase_training(
            archive, registry, args.cities.split(","), layout, phases, settings,
            log=log, jobs=args.jobs,
        )
    training.write_training_manifest(Path(args.registry) / "training_manifest.tsv",
                                     phases, settings)
    print(f"registry {args.registry}: {len(registry)} checkpoints")
    return EXIT_OK


def cmd_predict(args) -> int:
    archive = MovieArchive(args.archive, GridDims(*args.dims))
    registry = training.ModelRegistry(args.registry)
    layout = plan_layout(GridDims(*args.dims), args.tile[0], args.tile[1])
    frames = training.predict_city(
        registry, archive, args.city, args.day, args.time, layout,
        horizon=args.horizon, smoothing=SmoothingConfig(window=args.window),
    )
    write_grid_tensor(frames, args.out)
    print(f"wrote {args.out} {frames.shape}")
    return EXIT_OK


def cmd_online_finetune(args) -> int:
    archive = MovieArchive(args.archive, GridDims(*args.dims))
    registry = training.ModelRegistry(args.registry)
    layout = plan_layout(GridDims(*args.dims), args.tile[0], args.tile[1])
    model = registry.load(args.city, args.subtask, args.subregion)
    result = training.online_finetune(
        model, archive, args.city, args.subtask, layout.rects[args.subregion],
        args.day, args.k, args.lr, horizon=model.config.horizon, seed=args.seed,
    )
    registry.save(args.city, args.subtask, args.subregion, result.model)
    flag = " (no similar days: left untouched)" if result.skipped else ""
    print(f"validation loss {result.before_loss:.6g} -> {result.after_loss:.6g}{flag}")
    return EXIT_OK


def _load_aligned(args) -> tuple[np.ndarray, np.ndarray]:
    pred = read_grid_tensor(args.pred)
    truth = read_grid_tensor(args.truth)
    if args.truth_time is not None:
        truth = truth[args.truth_time : args.truth_time + pred.shape[0]]
    if pred.shape != truth.shape:
        raise InvalidInputError(f"prediction {pred.shape} and truth {truth.shape} do not align")
    return pred, truth


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_evaluate(args) -> int:
    pred, truth = _load_aligned(args)
    report = losses.per_channel_mse_report(pred, truth)
    _emit("\n".join(report.lines()), args.out)
    return EXIT_OK


def cmd_bias_report(args) -> int:
    pred, truth = _load_aligned(args)
    ch = 2  # heading channel
    report = losses.heading_bias_report(pred[..., ch], truth[..., ch])
    _emit(report.format_table(), args.out)
    return EXIT_OK


_COMMANDS = {
    "generate": cmd_generate,
    "features": cmd_features,
    "plan": cmd_plan,
    "crop": cmd_crop,
    "stitch": cmd_stitch,
    "train": cmd_train,
    "predict": cmd_predict,
    "online-finetune": cmd_online_finetune,
    "evaluate": cmd_evaluate,
    "bias-report": cmd_bias_report,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, list(sys.argv[1:] if argv is None else argv))
    except SystemExit as exc:  # argparse --help or usage error
        return int(exc.code or 0)
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"gridcast: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"gridcast: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        return _COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"gridcast: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"gridcast: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (InvalidConfigError, InvalidInputError) as exc:
        print(f"gridcast: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"gridcast: {exc}", file=sys.stderr)
        return EXIT_IO


def run() -> None:
    raise SystemExit(main())


if __name__ == "__main__":
    run()
