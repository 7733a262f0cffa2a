"""U-Net pixel classifier with explicit forward and backward passes.

Everything is plain numpy so every gradient is written out and can be
checked against finite differences.  Convolutions run as im2col matrix
products; layout is NHWC throughout.  The default configuration (5
encoder levels, 32 base channels, 3x3 same-padding convolutions, 2x2
max pooling, nearest upsampling with a channel-halving projection and
skip concatenation, final 1x1 head) has 23 convolution layers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .covariance import FeatureStats
from .dataset import HeightQuantizer
from . import tenio


class GradientError(RuntimeError):
    """Non-finite gradient; message names the parameter."""


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int
    class_counts: tuple[int, ...]
    base_channels: int = 32
    levels: int = 5
    kernel: int = 3
    pool: int = 2

    def __post_init__(self):
        object.__setattr__(self, "class_counts", tuple(int(k) for k in self.class_counts))
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if any(k < 2 for k in self.class_counts):
            raise ValueError("every class count must be >= 2")

    @property
    def out_channels(self) -> int:
        return sum(self.class_counts)

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)

    def to_dict(self) -> dict:
        return {
            "in_channels": self.in_channels,
            "class_counts": list(self.class_counts),
            "base_channels": self.base_channels,
            "levels": self.levels,
            "kernel": self.kernel,
            "pool": self.pool,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(
            in_channels=d["in_channels"],
            class_counts=tuple(d["class_counts"]),
            base_channels=d["base_channels"],
            levels=d["levels"],
            kernel=d["kernel"],
            pool=d["pool"],
        )


def conv_layer_specs(config: UNetConfig) -> list[tuple[str, int, int, int]]:
    """All convolution layers in execution order: (name, kernel, cin, cout)."""
    k = config.kernel
    specs = []
    cin = config.in_channels
    for lvl in range(config.levels):
        cout = config.level_channels(lvl)
        specs.append((f"enc{lvl}.conv1", k, cin, cout))
        specs.append((f"enc{lvl}.conv2", k, cout, cout))
        cin = cout
    for d in range(config.levels - 1):
        lvl = config.levels - 2 - d  # encoder level being rejoined
        cout = config.level_channels(lvl)
        specs.append((f"dec{d}.up", k, 2 * cout, cout))
        specs.append((f"dec{d}.conv1", k, 2 * cout, cout))
        specs.append((f"dec{d}.conv2", k, cout, cout))
    specs.append(("head", 1, config.base_channels, config.out_channels))
    return specs


def count_conv_layers(config: UNetConfig) -> int:
    return len(conv_layer_specs(config))


def xavier_init(config: UNetConfig, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    """Uniform(+-sqrt(6/(fan_in+fan_out))) weights, zero biases.

    Fans count the full receptive field: fan_in = k*k*cin,
    fan_out = k*k*cout.  Deterministic for a given seed.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    params: dict[str, np.ndarray] = {}
    for name, k, cin, cout in conv_layer_specs(config):
        fan_in = k * k * cin
        fan_out = k * k * cout
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(k, k, cin, cout)).astype(dtype)
        params[f"{name}.b"] = np.zeros(cout, dtype=dtype)
    return params


# ---------------------------------------------------------------------------
# primitive layers (NHWC)

# Scratch buffers for the im2col copies, keyed by shape and dtype.  They
# are only ever alive within a single conv_forward/conv_backward call
# (nothing pooled is returned or cached), which keeps repeated training
# steps from churning through fresh large allocations.
_SCRATCH: dict[tuple, np.ndarray] = {}


def _scratch(shape: tuple, dtype, zero: bool = False) -> np.ndarray:
    key = (shape, np.dtype(dtype).str)
    buf = _SCRATCH.get(key)
    if buf is None:
        buf = np.zeros(shape, dtype)
        _SCRATCH[key] = buf
    elif zero:
        buf.fill(0)
    return buf


def clear_scratch() -> None:
    _SCRATCH.clear()


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """[B, H, W, C] -> [B, H, W, k*k*C] with same padding (pooled scratch)."""
    if k == 1:
        return x
    pad = (k - 1) // 2
    b, h, w, c = x.shape
    xp = _scratch((b, h + 2 * pad, w + 2 * pad, c), x.dtype)
    # _col2im may have dirtied the same buffer's border ring; re-zero it
    xp[:, :pad, :, :] = 0
    xp[:, pad + h:, :, :] = 0
    xp[:, :, :pad, :] = 0
    xp[:, :, pad + w:, :] = 0
    xp[:, pad:pad + h, pad:pad + w, :] = x
    cols = _scratch((b, h, w, k * k * c), x.dtype)
    t = 0
    for di in range(k):
        for dj in range(k):
            cols[..., t * c:(t + 1) * c] = xp[:, di:di + h, dj:dj + w, :]
            t += 1
    return cols


def _col2im(dcols: np.ndarray, x_shape, k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add column gradients back to the input."""
    if k == 1:
        return dcols
    b, h, w, c = x_shape
    pad = (k - 1) // 2
    dxp = _scratch((b, h + 2 * pad, w + 2 * pad, c), dcols.dtype, zero=True)
    t = 0
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + h, dj:dj + w, :] += dcols[..., t * c:(t + 1) * c]
            t += 1
    return dxp[:, pad:pad + h, pad:pad + w, :].copy()


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k, _, cin, cout = w.shape
    cols = _im2col(x, k)
    y = cols.reshape(-1, k * k * cin) @ w.reshape(k * k * cin, cout)
    return y.reshape(x.shape[:3] + (cout,)) + b


def conv_backward(x: np.ndarray, w: np.ndarray, dy: np.ndarray, need_dx: bool = True):
    k, _, cin, cout = w.shape
    cols = _im2col(x, k).reshape(-1, k * k * cin)
    dy_flat = dy.reshape(-1, cout)
    dw = (cols.T @ dy_flat).reshape(w.shape)
    db = dy_flat.sum(axis=0)
    if not need_dx:
        return None, dw, db
    dcols = (dy_flat @ w.reshape(k * k * cin, cout).T).reshape(
        x.shape[:3] + (k * k * cin,)
    )
    dx = _col2im(dcols, x.shape, k)
    return dx, dw, db


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return np.where(x > 0, dy, 0)


def maxpool_forward(x: np.ndarray):
    """2x2 stride-2 max pooling; ties resolve to the first position."""
    b, h, w, c = x.shape
    xr = x.reshape(b, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    xr = xr.reshape(b, h // 2, w // 2, 4, c)
    idx = xr.argmax(axis=3)
    y = np.take_along_axis(xr, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return y, idx


def maxpool_backward(idx: np.ndarray, dy: np.ndarray, x_shape) -> np.ndarray:
    b, h, w, c = x_shape
    dxr = np.zeros((b, h // 2, w // 2, 4, c), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[:, :, :, None, :], dy[:, :, :, None, :], axis=3)
    dxr = dxr.reshape(b, h // 2, w // 2, 2, 2, c).transpose(0, 1, 3, 2, 4, 5)
    return dxr.reshape(x_shape)


def upsample_forward(x: np.ndarray) -> np.ndarray:
    return x.repeat(2, axis=1).repeat(2, axis=2)


def upsample_backward(dy: np.ndarray) -> np.ndarray:
    b, h, w, c = dy.shape
    return dy.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# full network

def unet_forward(
    config: UNetConfig,
    params: dict[str, np.ndarray],
    x: np.ndarray,
    want_cache: bool = False,
):
    """Logits [B, H, W, sum(class_counts)]; H, W divisible by 2^(levels-1)."""
    b, h, w, cin = x.shape
    if cin != config.in_channels:
        raise ValueError(f"expected {config.in_channels} input channels, got {cin}")
    factor = 2 ** (config.levels - 1)
    if h % factor or w % factor:
        raise ValueError(
            f"spatial size {h}x{w} must be divisible by {factor} "
            f"for {config.levels} levels"
        )

    cache: dict[str, np.ndarray] = {}
    skips = []
    cur = x
    for lvl in range(config.levels):
        for cname in ("conv1", "conv2"):
            name = f"enc{lvl}.{cname}"
            cache[f"{name}.x"] = cur
            pre = conv_forward(cur, params[f"{name}.w"], params[f"{name}.b"])
            cache[f"{name}.pre"] = pre
            cur = relu_forward(pre)
        if lvl < config.levels - 1:
            skips.append(cur)
            pooled, idx = maxpool_forward(cur)
            cache[f"pool{lvl}.idx"] = idx
            cache[f"pool{lvl}.xshape"] = cur.shape
            cur = pooled

    for d in range(config.levels - 1):
        skip = skips[config.levels - 2 - d]
        up = upsample_forward(cur)
        cache[f"dec{d}.up.x"] = up
        pre = conv_forward(up, params[f"dec{d}.up.w"], params[f"dec{d}.up.b"])
        cache[f"dec{d}.up.pre"] = pre
        proj = relu_forward(pre)
        if proj.shape[-1] != skip.shape[-1]:
            raise AssertionError(
                f"decoder level {d}: projected channels {proj.shape[-1]} "
                f"!= skip channels {skip.shape[-1]}"
            )
        cur = np.concatenate([skip, proj], axis=-1)
        for cname in ("conv1", "conv2"):
            name = f"dec{d}.{cname}"
            cache[f"{name}.x"] = cur
            pre = conv_forward(cur, params[f"{name}.w"], params[f"{name}.b"])
            cache[f"{name}.pre"] = pre
            cur = relu_forward(pre)

    cache["head.x"] = cur
    logits = conv_forward(cur, params["head.w"], params["head.b"])
    if want_cache:
        return logits, cache
    return logits


def unet_backward(
    config: UNetConfig,
    params: dict[str, np.ndarray],
    cache: dict[str, np.ndarray],
    dlogits: np.ndarray,
) -> dict[str, np.ndarray]:
    """Gradients of every parameter given d(loss)/d(logits)."""
    grads: dict[str, np.ndarray] = {}

    dcur, dw, db = conv_backward(cache["head.x"], params["head.w"], dlogits)
    grads["head.w"], grads["head.b"] = dw, db

    for d in range(config.levels - 2, -1, -1):
        for cname in ("conv2", "conv1"):
            name = f"dec{d}.{cname}"
            dpre = relu_backward(cache[f"{name}.pre"], dcur)
            dcur, dw, db = conv_backward(cache[f"{name}.x"], params[f"{name}.w"], dpre)
            grads[f"{name}.w"], grads[f"{name}.b"] = dw, db
        skip_c = params[f"dec{d}.up.w"].shape[-1]
        dskip = dcur[..., :skip_c]
        dproj = dcur[..., skip_c:]
        dpre = relu_backward(cache[f"dec{d}.up.pre"], dproj)
        dup, dw, db = conv_backward(cache[f"dec{d}.up.x"], params[f"dec{d}.up.w"], dpre)
        grads[f"dec{d}.up.w"], grads[f"dec{d}.up.b"] = dw, db
        dcur = upsample_backward(dup)
        # stash the skip gradient until the encoder pass reaches its level
        grads[f"_skip{config.levels - 2 - d}"] = dskip

    for lvl in range(config.levels - 1, -1, -1):
        if lvl < config.levels - 1:
            dcur = maxpool_backward(
                cache[f"pool{lvl}.idx"], dcur, cache[f"pool{lvl}.xshape"]
            )
            dcur = dcur + grads.pop(f"_skip{lvl}")
        for cname in ("conv2", "conv1"):
            name = f"enc{lvl}.{cname}"
            dpre = relu_backward(cache[f"{name}.pre"], dcur)
            dcur, dw, db = conv_backward(
                cache[f"{name}.x"], params[f"{name}.w"], dpre,
                need_dx=name != "enc0.conv1",
            )
            grads[f"{name}.w"], grads[f"{name}.b"] = dw, db

    return grads


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross entropy over non-ignored pixels and its logit gradient.

    ``labels`` holds class indices with -1 marking ignored pixels; the
    gradient is softmax minus one-hot, scaled by 1/n_valid, and exactly
    zero on ignored pixels.
    """
    labels = np.asarray(labels)
    valid = labels >= 0
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ValueError("all pixels carry the ignore label")

    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    safe_labels = np.where(valid, labels, 0)
    true_logit = np.take_along_axis(shifted, safe_labels[..., None], axis=-1)[..., 0]
    losses = np.where(valid, log_z - true_logit, 0.0)
    loss = float(losses.sum() / n_valid)

    grad = softmax(logits)
    one_hot_idx = safe_labels[..., None]
    np.put_along_axis(
        grad, one_hot_idx,
        np.take_along_axis(grad, one_hot_idx, axis=-1) - 1.0, axis=-1,
    )
    grad *= valid[..., None] / n_valid
    return loss, grad.astype(logits.dtype)


def sgd_step(
    params: dict[str, np.ndarray],
    velocity: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float = 0.9,
) -> None:
    """In-place heavy-ball update: v <- momentum*v + g; w <- w - lr*v."""
    for name, w in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
        v = velocity[name]
        v *= momentum
        v += g
        w -= lr * v


def lr_at(
    epoch: int,
    lr0: float = 0.01,
    factor: float = 0.5,
    period: int = 200,
) -> float:
    """Stepped decay: lr0 * factor ** floor(epoch / period)."""
    return lr0 * factor ** (epoch // period)


# ---------------------------------------------------------------------------
# model state and checkpoints

@dataclass
class ModelState:
    """Everything needed to resume or apply a trained classifier."""

    config: UNetConfig
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    quantizers: dict[str, HeightQuantizer]
    feature_stats: FeatureStats | None = None
    epoch: int = 0
    seed: int = 0
    mode: str = "FP"

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(self.quantizers.keys())

    def logit_slices(self) -> dict[str, slice]:
        """Per-target slices into the stacked logit channels."""
        out = {}
        start = 0
        for target, k in zip(self.targets, self.config.class_counts):
            out[target] = slice(start, start + k)
            start += k
        return out

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


def init_model(
    config: UNetConfig,
    quantizers: dict[str, HeightQuantizer],
    seed: int,
    feature_stats: FeatureStats | None = None,
    dtype=np.float32,
    mode: str = "FP",
) -> ModelState:
    if tuple(q.k for q in quantizers.values()) != config.class_counts:
        raise ValueError("quantizer class counts must match config.class_counts")
    params = xavier_init(config, seed, dtype=dtype)
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(
        config=config,
        params=params,
        velocity=velocity,
        quantizers=quantizers,
        feature_stats=feature_stats,
        epoch=0,
        seed=seed,
        mode=mode,
    )


def save_checkpoint(state: ModelState, out_dir) -> None:
    """One `.ten` file per parameter and momentum buffer + manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in state.params.items():
        tenio.write_tensor(arr, out / f"{name}.ten", name=name)
    for name, arr in state.velocity.items():
        tenio.write_tensor(arr, out / f"opt.{name}.ten", name=f"momentum:{name}")
    manifest = {
        "format": "tomoheight-checkpoint-v1",
        "network": state.config.to_dict(),
        "targets": list(state.targets),
        "quantizers": {t: q.to_dict() for t, q in state.quantizers.items()},
        "feature_stats": None if state.feature_stats is None else {
            "mean": state.feature_stats.mean.tolist(),
            "std": state.feature_stats.std.tolist(),
        },
        "epoch": state.epoch,
        "seed": state.seed,
        "mode": state.mode,
        "parameters": sorted(state.params.keys()),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_checkpoint(in_dir) -> ModelState:
    src = Path(in_dir)
    manifest = json.loads((src / "manifest.json").read_text())
    config = UNetConfig.from_dict(manifest["network"])
    params = {
        name: tenio.read_tensor(src / f"{name}.ten")
        for name in manifest["parameters"]
    }
    velocity = {
        name: tenio.read_tensor(src / f"opt.{name}.ten")
        for name in manifest["parameters"]
    }
    stats = None
    if manifest["feature_stats"] is not None:
        stats = FeatureStats(
            mean=np.asarray(manifest["feature_stats"]["mean"]),
            std=np.asarray(manifest["feature_stats"]["std"]),
        )
    quantizers = {
        t: HeightQuantizer.from_dict(manifest["quantizers"][t])
        for t in manifest["targets"]
    }
    return ModelState(
        config=config,
        params=params,
        velocity=velocity,
        quantizers=quantizers,
        feature_stats=stats,
        epoch=manifest["epoch"],
        seed=manifest["seed"],
        mode=manifest.get("mode", "FP"),
    )
