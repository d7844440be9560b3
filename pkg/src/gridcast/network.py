"""A small encoder-decoder ConvNet with explicit numpy backpropagation.

The receptive field grows by pooling rather than by large kernels: each
encoder level applies two 3x3 convolutions (rectified) and a 2x2 max-pool,
the mirrored decoder upsamples by nearest-neighbour, concatenates the skip
tensor and convolves again. Data sparsity is handled with a mask channel - a
per-pixel indicator of nonzero input-channel mean - concatenated to the last
feature map just before the final 1x1 convolution. Two head types exist:
``regression`` emits ``horizon`` real maps, ``heading`` emits ``5 * horizon``
class-logit maps.

Tiles whose sides are not divisible by 2**depth are zero-padded symmetrically
on the way in and cropped on the way out, so output spatial dims always equal
input spatial dims.

Gradients are exact (hand-derived per layer) and verified against central
finite differences by :func:`grad_check`. Everything is float64 numpy by
default; pass ``dtype=np.float32`` at init for faster training behind the
same interfaces.

A model's forward/backward pair is single-threaded with respect to its cache;
distinct models train in parallel freely.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    FormatError,
    InvalidConfigError,
    InvalidInputError,
    NumericError,
    StateError,
    TruncationError,
)
from .movies import HEADING_CLASS_COUNT

HEAD_REGRESSION = "regression"
HEAD_HEADING = "heading"
HEAD_KINDS = (HEAD_REGRESSION, HEAD_HEADING)
HEAD_CLASSES = HEADING_CLASS_COUNT

CHECKPOINT_MAGIC = b"T4NN"
CHECKPOINT_VERSION = 1
CHECKPOINT_SUFFIX = ".t4nn"


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 101
    base_width: int = 8
    depth: int = 3
    head: str = HEAD_REGRESSION
    horizon: int = 3
    tile: tuple[int, int] = (299, 299)

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.base_width < 1 or self.horizon < 1:
            raise InvalidConfigError(f"degenerate net config {self}")
        if self.depth < 1:
            raise InvalidConfigError(f"depth must be >= 1, got {self.depth}")
        if self.head not in HEAD_KINDS:
            raise InvalidConfigError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.tile[0] < 1 or self.tile[1] < 1:
            raise InvalidConfigError(f"degenerate tile {self.tile}")

    @property
    def out_maps(self) -> int:
        return HEAD_CLASSES * self.horizon if self.head == HEAD_HEADING else self.horizon


def _conv_shapes(name: str, cin: int, cout: int, k: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{name}.w", (cout, cin, k, k)), (f"{name}.b", (cout,))]


def parameter_shapes(config: NetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declaration-ordered (name, shape) pairs; also the checkpoint tensor order."""
    shapes: list[tuple[str, tuple[int, ...]]] = []
    cin = config.in_channels
    for level in range(config.depth):
        cout = config.base_width << level
        shapes += _conv_shapes(f"enc{level}a", cin, cout, 3)
        shapes += _conv_shapes(f"enc{level}b", cout, cout, 3)
        cin = cout
    cbot = config.base_width << config.depth
    shapes += _conv_shapes("bota", cin, cbot, 3)
    shapes += _conv_shapes("botb", cbot, cbot, 3)
    cin = cbot
    for level in reversed(range(config.depth)):
        skip = config.base_width << level
        shapes += _conv_shapes(f"dec{level}a", cin + skip, skip, 3)
        shapes += _conv_shapes(f"dec{level}b", skip, skip, 3)
        cin = skip
    shapes += _conv_shapes("head", cin + 1, config.out_maps, 1)  # +1: mask channel
    return shapes


HEAD_PARAMS = ("head.w", "head.b")


class UNetModel:
    """Parameter container; the functional forward/backward live below."""

    def __init__(self, config: NetConfig, seed: int, params: dict[str, np.ndarray]):
        self.config = config
        self.seed = seed
        self.params = params

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy(self) -> "UNetModel":
        return UNetModel(self.config, self.seed, {k: v.copy() for k, v in self.params.items()})

    def forward(self, stack: np.ndarray, mask: np.ndarray) -> np.ndarray:
        return forward(self, stack, mask)

    def forward_cached(self, stack: np.ndarray, mask: np.ndarray):
        return forward_cached(self, stack, mask)

    def backward(self, cache: "ForwardCache", dout: np.ndarray) -> dict[str, np.ndarray]:
        return backward(self, cache, dout)


def init_model(config: NetConfig, seed: int, dtype=np.float64) -> UNetModel:
    """He-scaled random kernels, zero biases; deterministic per seed."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".b"):
            params[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
    return UNetModel(config=config, seed=seed, params=params)


def transfer_body(source: UNetModel, target: UNetModel) -> UNetModel:
    """Copy every shape-matching non-head tensor from source into target.

    Heads stay at the target's own initialization: the head shapes differ
    across head kinds, and re-initializing them uniformly keeps the transfer
    rule single-cased.
    """
    for name, value in source.params.items():
        if name in HEAD_PARAMS:
            continue
        if name in target.params and target.params[name].shape == value.shape:
            target.params[name] = value.copy()
    return target


def compute_mask(stack: np.ndarray) -> np.ndarray:
    """Binary plane marking pixels whose mean over input channels is not exactly zero."""
    stack = np.asarray(stack)
    if stack.ndim != 3:
        raise InvalidInputError(f"stack tile must be (C, H, W), got {stack.shape}")
    return (stack.mean(axis=0) != 0.0).astype(np.float64)


# ---------------------------------------------------------------------------
# Layer primitives (each forward paired with a hand-derived backward)
# ---------------------------------------------------------------------------

def _conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Same-padding cross-correlation; x (C, H, W), w (O, C, k, k) with odd k."""
    _, _, kh, kw = w.shape
    if kh == 1 and kw == 1:
        y = np.tensordot(w[:, :, 0, 0], x, axes=(1, 0))
    else:
        p = (kh - 1) // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
        y = np.einsum("ockl,chwkl->ohw", w, win, optimize=True)
    return y + b[:, None, None]


def _conv2d_back(
    dout: np.ndarray, x: np.ndarray, w: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    _, _, kh, kw = w.shape
    db = dout.sum(axis=(1, 2))
    if kh == 1 and kw == 1:
        dw = np.einsum("ohw,chw->oc", dout, x, optimize=True)[:, :, None, None]
        dx = np.tensordot(w[:, :, 0, 0].T, dout, axes=(1, 0))
        return dx, dw, db
    p = (kh - 1) // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    dw = np.einsum("ohw,chwkl->ockl", dout, win, optimize=True)
    H, W = x.shape[1:]
    dxp = np.zeros_like(xp)
    for k in range(kh):
        for l in range(kw):
            dxp[:, k : k + H, l : l + W] += np.tensordot(w[:, :, k, l], dout, axes=(0, 0))
    dx = dxp[:, p : p + H, p : p + W]
    return dx, dw, db


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _relu_back(dout: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dout * (x > 0.0)


def _maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 stride-2 max pooling; H, W must be even. Returns (y, argmax index)."""
    C, H, W = x.shape
    blocks = x.reshape(C, H // 2, 2, W // 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H // 2, W // 2, 4)
    idx = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _maxpool2_back(dout: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    C, H, W = in_shape
    blocks = np.zeros((C, H // 2, W // 2, 4), dtype=dout.dtype)
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(C, H // 2, W // 2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(C, H, W)


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _upsample2_back(dout: np.ndarray) -> np.ndarray:
    C, H2, W2 = dout.shape
    return dout.reshape(C, H2 // 2, 2, W2 // 2, 2).sum(axis=(2, 4))


def _pad_to_multiple(x: np.ndarray, multiple: int) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Symmetric zero-pad of the last two axes up to the next multiple."""
    H, W = x.shape[-2:]
    ph, pw = (-H) % multiple, (-W) % multiple
    top, left = ph // 2, pw // 2
    pads = (top, ph - top, left, pw - left)
    if ph == 0 and pw == 0:
        return x, pads
    width = [(0, 0)] * (x.ndim - 2) + [(pads[0], pads[1]), (pads[2], pads[3])]
    return np.pad(x, width), pads


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------

@dataclass
class ForwardCache:
    """Intermediate activations saved for one backward pass."""

    stack_shape: tuple[int, ...]
    pads: tuple[int, int, int, int] = (0, 0, 0, 0)
    conv_inputs: dict[str, np.ndarray] = field(default_factory=dict)
    pre_relu: dict[str, np.ndarray] = field(default_factory=dict)
    pool_idx: dict[int, np.ndarray] = field(default_factory=dict)
    pool_in_shape: dict[int, tuple[int, ...]] = field(default_factory=dict)
    skip_channels: dict[int, int] = field(default_factory=dict)


def _check_forward_args(model: UNetModel, stack: np.ndarray, mask: np.ndarray) -> None:
    cfg = model.config
    if stack.ndim != 3 or stack.shape[0] != cfg.in_channels:
        raise InvalidInputError(f"stack must be ({cfg.in_channels}, H, W), got {np.shape(stack)}")
    if stack.shape[1:] != cfg.tile:
        raise InvalidInputError(f"stack spatial dims {stack.shape[1:]} != config tile {cfg.tile}")
    if mask.shape != stack.shape[1:]:
        raise InvalidInputError(f"mask shape {mask.shape} does not match tile {stack.shape[1:]}")


def _conv_relu(name: str, x: np.ndarray, params, cache: ForwardCache | None) -> np.ndarray:
    z = _conv2d(x, params[f"{name}.w"], params[f"{name}.b"])
    if cache is not None:
        cache.conv_inputs[name] = x
        cache.pre_relu[name] = z
    return _relu(z)


def _forward(model: UNetModel, stack: np.ndarray, mask: np.ndarray, cache: ForwardCache | None):
    cfg = model.config
    params = model.params
    dtype = next(iter(params.values())).dtype
    x = np.asarray(stack, dtype=dtype)
    m = np.asarray(mask, dtype=dtype)
    out_h, out_w = x.shape[1:]

    x, pads = _pad_to_multiple(x, 1 << cfg.depth)
    mp, _ = _pad_to_multiple(m[None], 1 << cfg.depth)
    if cache is not None:
        cache.pads = pads

    skips: list[np.ndarray] = []
    for level in range(cfg.depth):
        x = _conv_relu(f"enc{level}a", x, params, cache)
        x = _conv_relu(f"enc{level}b", x, params, cache)
        skips.append(x)
        if cache is not None:
            cache.pool_in_shape[level] = x.shape
        x, idx = _maxpool2(x)
        if cache is not None:
            cache.pool_idx[level] = idx

    x = _conv_relu("bota", x, params, cache)
    x = _conv_relu("botb", x, params, cache)

    for level in reversed(range(cfg.depth)):
        x = _upsample2(x)
        skip = skips[level]
        if cache is not None:
            cache.skip_channels[level] = skip.shape[0]
        x = np.concatenate([skip, x], axis=0)
        x = _conv_relu(f"dec{level}a", x, params, cache)
        x = _conv_relu(f"dec{level}b", x, params, cache)

    x = np.concatenate([x, mp], axis=0)
    if cache is not None:
        cache.conv_inputs["head"] = x
    out = _conv2d(x, params["head.w"], params["head.b"])
    top, _, left, _ = pads
    return out[:, top : top + out_h, left : left + out_w]


def forward(model: UNetModel, stack: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Run the network; output spatial dims equal input spatial dims."""
    _check_forward_args(model, np.asarray(stack), np.asarray(mask))
    return _forward(model, stack, mask, cache=None)


def forward_cached(model: UNetModel, stack: np.ndarray, mask: np.ndarray):
    """Forward pass that also returns the activation cache for :func:`backward`."""
    stack = np.asarray(stack)
    _check_forward_args(model, stack, np.asarray(mask))
    cache = ForwardCache(stack_shape=stack.shape)
    out = _forward(model, stack, mask, cache)
    return out, cache


def _conv_relu_back(name: str, dout: np.ndarray, params, cache: ForwardCache, grads) -> np.ndarray:
    dz = _relu_back(dout, cache.pre_relu[name])
    dx, dw, db = _conv2d_back(dz, cache.conv_inputs[name], params[f"{name}.w"])
    grads[f"{name}.w"] = dw
    grads[f"{name}.b"] = db
    return dx


def backward(model: UNetModel, cache: ForwardCache, dout: np.ndarray) -> dict[str, np.ndarray]:
    """Exact parameter gradients of the forward map, given d(loss)/d(output)."""
    if not isinstance(cache, ForwardCache) or "head" not in cache.conv_inputs:
        raise StateError("backward() needs the cache produced by forward_cached()")
    cfg = model.config
    params = model.params
    _, H, W = cache.stack_shape
    dout = np.asarray(dout, dtype=cache.conv_inputs["head"].dtype)
    if dout.shape != (cfg.out_maps, H, W):
        raise InvalidInputError(
            f"output gradient must be ({cfg.out_maps}, {H}, {W}), got {dout.shape}"
        )
    grads: dict[str, np.ndarray] = {}

    # Undo the output crop: pixels introduced by padding received no gradient.
    top, bottom, left, right = cache.pads
    d = np.zeros((cfg.out_maps, H + top + bottom, W + left + right), dtype=dout.dtype)
    d[:, top : top + H, left : left + W] = dout

    d, grads["head.w"], grads["head.b"] = _conv2d_back(d, cache.conv_inputs["head"], params["head.w"])
    d = d[:-1]  # the mask channel is an input, not an activation

    # Decoder sweep, collecting the gradient each level feeds into its skip.
    skip_grads: dict[int, np.ndarray] = {}
    for level in range(cfg.depth):
        d = _conv_relu_back(f"dec{level}b", d, params, cache, grads)
        d = _conv_relu_back(f"dec{level}a", d, params, cache, grads)
        n_skip = cache.skip_channels[level]
        skip_grads[level] = d[:n_skip]
        d = _upsample2_back(d[n_skip:])

    d = _conv_relu_back("botb", d, params, cache, grads)
    d = _conv_relu_back("bota", d, params, cache, grads)

    # Encoder sweep: pool-path gradient plus the stored skip gradient.
    for level in reversed(range(cfg.depth)):
        d = _maxpool2_back(d, cache.pool_idx[level], cache.pool_in_shape[level])
        d = d + skip_grads[level]
        d = _conv_relu_back(f"enc{level}b", d, params, cache, grads)
        d = _conv_relu_back(f"enc{level}a", d, params, cache, grads)

    return {name: grads[name] for name in model.params}


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """SGD or Adam state. Adam uses the standard bias-corrected moments."""

    rule: str = "sgd"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.rule not in ("sgd", "adam"):
            raise InvalidConfigError(f"optimizer rule must be 'sgd' or 'adam', got {self.rule!r}")
        if self.lr < 0:
            raise InvalidConfigError(f"learning rate must be >= 0, got {self.lr}")


def apply_update(model: UNetModel, grads: dict[str, np.ndarray], opt: OptimizerState):
    """One in-place parameter update; returns (model, opt) for chaining."""
    for name, p in model.params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise InvalidInputError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient in {name}; training halted")
    opt.step += 1
    for name, p in model.params.items():
        g = grads[name]
        if opt.rule == "sgd":
            p -= opt.lr * g
            continue
        m = opt.m.setdefault(name, np.zeros_like(p))
        v = opt.v.setdefault(name, np.zeros_like(p))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * (g * g)
        m_hat = m / (1.0 - opt.beta1**opt.step)
        v_hat = v / (1.0 - opt.beta2**opt.step)
        p -= opt.lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    return model, opt


# ---------------------------------------------------------------------------
# Gradient verification
# ---------------------------------------------------------------------------

class LinearModel:
    """A bare 1x1 convolution over (stack ++ mask): the exact-gradient baseline.

    Quadratic losses make central differences exact on this model, which pins
    the verification harness itself before it judges the deep network.
    """

    def __init__(self, in_channels: int, out_maps: int, seed: int, tile: tuple[int, int]):
        rng = np.random.default_rng(seed)
        cin = in_channels + 1
        self.config = NetConfig(
            in_channels=in_channels, base_width=1, depth=1, head=HEAD_REGRESSION,
            horizon=out_maps, tile=tile,
        )
        self.params = {
            "head.w": rng.standard_normal((out_maps, cin, 1, 1)) * np.sqrt(1.0 / cin),
            "head.b": np.zeros(out_maps),
        }
        self.seed = seed

    def forward(self, stack: np.ndarray, mask: np.ndarray) -> np.ndarray:
        x = np.concatenate([np.asarray(stack, dtype=np.float64),
                            np.asarray(mask, dtype=np.float64)[None]], axis=0)
        return _conv2d(x, self.params["head.w"], self.params["head.b"])

    def forward_cached(self, stack: np.ndarray, mask: np.ndarray):
        x = np.concatenate([np.asarray(stack, dtype=np.float64),
                            np.asarray(mask, dtype=np.float64)[None]], axis=0)
        out = _conv2d(x, self.params["head.w"], self.params["head.b"])
        return out, x

    def backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        if cache is None:
            raise StateError("backward() needs the cache produced by forward_cached()")
        _, dw, db = _conv2d_back(np.asarray(dout, dtype=np.float64), cache, self.params["head.w"])
        return {"head.w": dw, "head.b": db}


def grad_check(model, stack, mask, loss_fn, eps: float = 1e-5, *, samples: int = 200,
               seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn(prediction) -> (value, d value / d prediction)``. A random
    subsample of at least ``samples`` scalar parameters is probed; the error
    is |a - n| / max(|a|, |n|, 1e-12).
    """
    if eps <= 0:
        raise InvalidConfigError(f"finite-difference step must be > 0, got {eps}")
    out, cache = model.forward_cached(stack, mask)
    _, dpred = loss_fn(out)
    grads = model.backward(cache, dpred)

    coords = [(name, i) for name, p in model.params.items() for i in range(p.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > samples:
        picked = [coords[i] for i in rng.choice(len(coords), size=samples, replace=False)]
    else:
        picked = coords

    worst = 0.0
    for name, flat in picked:
        p = model.params[name]
        original = p.flat[flat]
        p.flat[flat] = original + eps
        hi, _ = loss_fn(model.forward(stack, mask))
        p.flat[flat] = original - eps
        lo, _ = loss_fn(model.forward(stack, mask))
        p.flat[flat] = original
        numeric = (hi - lo) / (2.0 * eps)
        analytic = grads[name].flat[flat]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<4sH")
_CKPT_CONFIG = struct.Struct("<IIIIIIII")  # in, width, depth, head kind, horizon, tile h/w, seed
_HEAD_KIND_CODE = {HEAD_REGRESSION: 0, HEAD_HEADING: 1}
_HEAD_KIND_NAME = {v: k for k, v in _HEAD_KIND_CODE.items()}


def save_model(model: UNetModel, path: str | Path) -> None:
    """Checkpoint: magic, version, fixed-order config ints, then the parameter
    tensors in declaration order as little-endian 8-byte reals."""
    cfg = model.config
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_CKPT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
        fh.write(
            _CKPT_CONFIG.pack(
                cfg.in_channels, cfg.base_width, cfg.depth, _HEAD_KIND_CODE[cfg.head],
                cfg.horizon, cfg.tile[0], cfg.tile[1], model.seed,
            )
        )
        for name, _ in parameter_shapes(cfg):
            fh.write(model.params[name].astype("<f8").tobytes())


def load_model(path: str | Path) -> UNetModel:
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = _CKPT_HEADER.size + _CKPT_CONFIG.size
    if len(raw) < head_size:
        raise TruncationError(f"{path}: shorter than the {head_size}-byte checkpoint header")
    magic, version = _CKPT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    cin, width, depth, head_code, horizon, tile_h, tile_w, seed = _CKPT_CONFIG.unpack_from(
        raw, _CKPT_HEADER.size
    )
    if head_code not in _HEAD_KIND_NAME:
        raise FormatError(f"{path}: unknown head kind code {head_code}")
    config = NetConfig(
        in_channels=cin, base_width=width, depth=depth, head=_HEAD_KIND_NAME[head_code],
        horizon=horizon, tile=(tile_h, tile_w),
    )
    params: dict[str, np.ndarray] = {}
    offset = head_size
    for name, shape in parameter_shapes(config):
        nbytes = int(np.prod(shape)) * 8
        if offset + nbytes > len(raw):
            raise TruncationError(f"{path}: parameter payload ends inside tensor {name}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=int(np.prod(shape)),
                                     offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes after the last tensor")
    return UNetModel(config=config, seed=seed, params=params)
