"""Pixel metrics, the composite CE+MAPE training loss, and bias diagnostics.

All regression metrics work in the scaled [0, 1] domain (bytes / 255). MAPE
excludes pixels whose truth falls below ``min_truth`` (default 1/255): byte 0
doubles as "missing", so such pixels are unmeasurable rather than infinitely
wrong. The composite loss is

    w_heading * CE(heading) + w_volume * MAPE(volume) + w_speed * MAPE(speed)

with CE the 5-class pixel cross-entropy over (missing, NW, NE, SW, SE).

Everything here is pure and reentrant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .movies import HEADING_CLASS_COUNT, HEADING_VALUES, SUBTASK_CHANNEL, heading_plane_to_classes

MIN_MAPE_TRUTH = 1.0 / 255.0


@dataclass(frozen=True)
class LossWeights:
    heading: float = 1.0
    volume: float = 1.0
    speed: float = 1.0

    def __post_init__(self) -> None:
        if min(self.heading, self.volume, self.speed) < 0:
            raise InvalidConfigError("loss weights must be non-negative")
        if self.heading == self.volume == self.speed == 0:
            raise InvalidConfigError("at least one loss weight must be positive")


def _check_shapes(pred: np.ndarray, truth: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    return pred, truth


def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = _check_shapes(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def mape(pred: np.ndarray, truth: np.ndarray, min_truth: float = MIN_MAPE_TRUTH) -> float:
    """Mean |pred - truth| / truth over pixels with truth >= min_truth.

    Pixels below the floor are excluded from both numerator and denominator;
    if none qualifies the result is 0.
    """
    pred, truth = _check_shapes(pred, truth)
    keep = truth >= min_truth
    n = int(keep.sum())
    if n == 0:
        return 0.0
    return float(np.sum(np.abs(pred[keep] - truth[keep]) / truth[keep]) / n)


def mape_qualifying_count(truth: np.ndarray, min_truth: float = MIN_MAPE_TRUTH) -> int:
    return int((np.asarray(truth, dtype=np.float64) >= min_truth).sum())


def softmax_classes(logits: np.ndarray) -> np.ndarray:
    """Stable softmax over the leading class axis of (5, ...) logits."""
    logits = np.asarray(logits, dtype=np.float64)
    z = logits - logits.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def _check_classes(logits: np.ndarray, truth_classes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    logits = np.asarray(logits, dtype=np.float64)
    truth_classes = np.asarray(truth_classes)
    if logits.ndim < 1 or logits.shape[0] != HEADING_CLASS_COUNT:
        raise InvalidInputError(f"logits must be ({HEADING_CLASS_COUNT}, ...), got {logits.shape}")
    if truth_classes.shape != logits.shape[1:]:
        raise InvalidInputError(
            f"class plane {truth_classes.shape} does not match logits {logits.shape}"
        )
    if truth_classes.size and (truth_classes.min() < 0 or truth_classes.max() >= HEADING_CLASS_COUNT):
        raise InvalidInputError("truth classes must lie in [0, 4]")
    return logits, truth_classes.astype(np.int64)


def cross_entropy_heading(logits: np.ndarray, truth_classes: np.ndarray) -> float:
    """Mean over pixels of -log softmax(logits)[truth], max-subtracted for stability."""
    logits, truth_classes = _check_classes(logits, truth_classes)
    z = logits - logits.max(axis=0, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=0))
    picked = np.take_along_axis(z, truth_classes[None], axis=0)[0]
    return float(np.mean(lse - picked))


def cross_entropy_heading_grad(
    logits: np.ndarray, truth_classes: np.ndarray
) -> tuple[float, np.ndarray]:
    """CE value and its gradient w.r.t. the logits: (softmax - onehot) / pixels."""
    logits, truth_classes = _check_classes(logits, truth_classes)
    probs = softmax_classes(logits)
    n = truth_classes.size
    grad = probs.copy()
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, truth_classes[None], 1.0, axis=0)
    grad = (grad - onehot) / n
    return cross_entropy_heading(logits, truth_classes), grad


def mape_grad(
    pred: np.ndarray, truth: np.ndarray, min_truth: float = MIN_MAPE_TRUTH
) -> tuple[float, np.ndarray]:
    """MAPE value and gradient w.r.t. pred: sign(pred - truth) / (truth * n) on
    qualifying pixels, zero elsewhere."""
    pred, truth = _check_shapes(pred, truth)
    keep = truth >= min_truth
    n = int(keep.sum())
    grad = np.zeros_like(pred)
    if n == 0:
        return 0.0, grad
    diff = pred - truth
    grad[keep] = np.sign(diff[keep]) / (truth[keep] * n)
    value = float(np.sum(np.abs(diff[keep]) / truth[keep]) / n)
    return value, grad


def mse_grad(pred: np.ndarray, truth: np.ndarray) -> tuple[float, np.ndarray]:
    pred, truth = _check_shapes(pred, truth)
    diff = pred - truth
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


@dataclass(frozen=True)
class CompositeLoss:
    """Eq-style weighted total plus the standalone per-term breakdown."""

    total: float
    ce_heading: float
    mape_volume: float
    mape_speed: float


def composite_loss(
    heading_logits: np.ndarray,
    heading_truth_classes: np.ndarray,
    vol_pred: np.ndarray,
    vol_truth: np.ndarray,
    spd_pred: np.ndarray,
    spd_truth: np.ndarray,
    weights: LossWeights = LossWeights(),
) -> CompositeLoss:
    ce = cross_entropy_heading(heading_logits, heading_truth_classes)
    mv = mape(vol_pred, vol_truth)
    ms = mape(spd_pred, spd_truth)
    total = weights.heading * ce + weights.volume * mv + weights.speed * ms
    return CompositeLoss(total=total, ce_heading=ce, mape_volume=mv, mape_speed=ms)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossReport:
    """Per-channel MSE/MAE in the scaled domain, MAPE for volume/speed, the
    leaderboard-style mean MSE, and the pixel counts behind the MAPE terms."""

    mse_by_channel: dict[str, float]
    mae_by_channel: dict[str, float]
    mape_volume: float
    mape_speed: float
    mape_counts: dict[str, int]
    mean_mse: float
    ce_heading: float | None = None
    composite: float | None = None

    def lines(self) -> list[str]:
        out = []
        for name, value in self.mse_by_channel.items():
            out.append(f"mse\t{name}\t{value:.12g}")
        out.append(f"mse\tmean\t{self.mean_mse:.12g}")
        for name, value in self.mae_by_channel.items():
            out.append(f"mae\t{name}\t{value:.12g}")
        out.append(f"mape\tvolume\t{self.mape_volume:.12g}")
        out.append(f"mape\tspeed\t{self.mape_speed:.12g}")
        for name, value in self.mape_counts.items():
            out.append(f"mape_count\t{name}\t{value}")
        if self.ce_heading is not None:
            out.append(f"ce\theading\t{self.ce_heading:.12g}")
        if self.composite is not None:
            out.append(f"composite\tall\t{self.composite:.12g}")
        return out


def per_channel_mse_report(pred_frames: np.ndarray, truth_frames: np.ndarray) -> LossReport:
    """Leaderboard-style report: per-channel MSE/MAE on bytes / 255, plus the
    channel-mean MSE that ranks submissions. The heading channel is scored in
    the same scaled-byte domain here, exactly the convention this loss design
    argues against; both views coexist on purpose."""
    pred = np.asarray(pred_frames)
    truth = np.asarray(truth_frames)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.shape[-1] != len(SUBTASK_CHANNEL):
        raise InvalidInputError(f"frames must have 3 trailing channels, got {pred.shape}")
    p = pred.astype(np.float64) / 255.0
    t = truth.astype(np.float64) / 255.0
    mse_by, mae_by, counts = {}, {}, {}
    for name, ch in SUBTASK_CHANNEL.items():
        mse_by[name] = mse(p[..., ch], t[..., ch])
        mae_by[name] = mae(p[..., ch], t[..., ch])
    for name in ("volume", "speed"):
        counts[name] = mape_qualifying_count(t[..., SUBTASK_CHANNEL[name]])
    return LossReport(
        mse_by_channel=mse_by,
        mae_by_channel=mae_by,
        mape_volume=mape(p[..., 0], t[..., 0]),
        mape_speed=mape(p[..., 1], t[..., 1]),
        mape_counts=counts,
        mean_mse=float(np.mean(list(mse_by.values()))),
    )


@dataclass(frozen=True)
class BiasRow:
    true_value: int
    mean_predicted: float  # nan when the group is empty
    count: int


@dataclass(frozen=True)
class BiasReport:
    """Mean predicted byte per true heading value, one row per legal code."""

    rows: tuple[BiasRow, ...]

    @property
    def total_count(self) -> int:
        return sum(r.count for r in self.rows)

    def mean_for(self, true_value: int) -> float:
        for row in self.rows:
            if row.true_value == true_value:
                return row.mean_predicted
        raise InvalidInputError(f"no row for true value {true_value}")

    def format_table(self) -> str:
        lines = ["I_true\tmean_predicted\tcount"]
        for row in self.rows:
            mean = "-" if row.count == 0 else f"{row.mean_predicted:.2f}"
            lines.append(f"{row.true_value}\t{mean}\t{row.count}")
        return "\n".join(lines)


def heading_bias_report(pred_values: np.ndarray, truth_values: np.ndarray) -> BiasReport:
    """Group predicted bytes by the true heading code and average each group.

    Truth bytes must be legal heading codes; predictions may be any byte in
    [0, 255] so that regression-head output can be diagnosed.
    """
    pred = np.asarray(pred_values, dtype=np.float64)
    truth = np.asarray(truth_values)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    if pred.size and (pred.min() < 0 or pred.max() > 255):
        raise InvalidInputError("predicted bytes must lie in [0, 255]")
    truth_classes = heading_plane_to_classes(truth)  # validates legality
    rows = []
    for cls, value in enumerate(HEADING_VALUES):
        group = pred[truth_classes == cls]
        mean = float(group.mean()) if group.size else float("nan")
        rows.append(BiasRow(true_value=value, mean_predicted=mean, count=int(group.size)))
    return BiasReport(rows=tuple(rows))
