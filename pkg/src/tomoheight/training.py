"""Training loop, fine-tuning, full-scene inference and metrics."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .config import RunConfig, TrainingConfig
from .covariance import normalize_features
from .dataset import PatchDataset
from .network import (
    ModelState,
    UNetConfig,
    init_model,
    lr_at,
    sgd_step,
    softmax_cross_entropy,
    unet_backward,
    unet_forward,
    xavier_init,
)

# tag for deterministic shuffle-stream derivation
_SEED_SHUFFLE = 23


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; carries the last good model state."""

    def __init__(self, message: str, state: ModelState, report: "TrainReport"):
        super().__init__(message)
        self.state = state
        self.report = report


@dataclass
class EpochRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    lr: float
    seconds: float


@dataclass
class TrainReport:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = float("inf")

    def to_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss,val_acc,lr,seconds"]
        for r in self.rows:
            lines.append(
                f"{r.epoch},{r.train_loss:.6f},{r.val_loss:.6f},"
                f"{r.val_acc:.6f},{r.lr:.8f},{r.seconds:.3f}"
            )
        return "\n".join(lines) + "\n"


def _target_loss_and_grad(state: ModelState, logits: np.ndarray, labels: dict):
    """Sum of per-target cross entropies and the stacked logit gradient."""
    grad = np.zeros_like(logits)
    total = 0.0
    for target, sl in state.logit_slices().items():
        loss_t, grad_t = softmax_cross_entropy(logits[..., sl], labels[target])
        total += loss_t
        grad[..., sl] = grad_t
    return total, grad


def _evaluate_split(state: ModelState, feats: np.ndarray, labels: dict, batch: int):
    """(mean loss, pixel accuracy) without touching gradients."""
    n = feats.shape[0]
    total_loss = 0.0
    correct = 0
    counted = 0
    for i in range(0, n, batch):
        xb = feats[i:i + batch]
        lb = {t: lab[i:i + batch] for t, lab in labels.items()}
        logits = unet_forward(state.config, state.params, xb)
        loss, _ = _target_loss_and_grad(state, logits, lb)
        total_loss += loss * xb.shape[0]
        for target, sl in state.logit_slices().items():
            pred = logits[..., sl].argmax(axis=-1)
            valid = lb[target] >= 0
            correct += int((pred[valid] == lb[target][valid]).sum())
            counted += int(valid.sum())
    return total_loss / n, (correct / counted if counted else 0.0)


def _prepare_split(ds: PatchDataset, split: str, targets, dtype):
    ps = ds.splits[split]
    feats, _ = normalize_features(ps.features.astype(dtype), ds.stats)
    labels = {t: ps.labels[t] for t in targets}
    return feats.astype(dtype), labels


def fit(
    state: ModelState,
    train_feats: np.ndarray,
    train_labels: dict,
    val_feats: np.ndarray,
    val_labels: dict,
    training: TrainingConfig,
    seed: int,
    step_hook=None,
) -> tuple[ModelState, TrainReport]:
    """Run the SGD loop on already-normalized patches.

    Keeps a copy of the parameters at the best validation loss and
    restores it before returning.  A non-finite loss raises
    :class:`TrainingDiverged` carrying the last good state.
    """
    report = TrainReport()
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), _SEED_SHUFFLE]))
    n = train_feats.shape[0]
    best_params = state.copy_params()

    for epoch in range(training.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, training.lr, training.decay_factor, training.decay_period)
        order = rng.permutation(n)
        epoch_loss = 0.0
        for i in range(0, n, training.batch):
            sel = order[i:i + training.batch]
            xb = train_feats[sel]
            lb = {t: lab[sel] for t, lab in train_labels.items()}
            logits, cache = unet_forward(state.config, state.params, xb, want_cache=True)
            loss, dlogits = _target_loss_and_grad(state, logits, lb)
            if not np.isfinite(loss):
                state.params = best_params
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}", state, report
                )
            grads = unet_backward(state.config, state.params, cache, dlogits)
            sgd_step(state.params, state.velocity, grads, lr, training.momentum)
            epoch_loss += loss * xb.shape[0]
            if step_hook is not None:
                step_hook(loss)

        val_loss, val_acc = _evaluate_split(state, val_feats, val_labels, training.batch)
        state.epoch = epoch + 1
        report.rows.append(EpochRow(
            epoch=epoch,
            train_loss=epoch_loss / n,
            val_loss=val_loss,
            val_acc=val_acc,
            lr=lr,
            seconds=time.perf_counter() - t0,
        ))
        if val_loss < report.best_val_loss:
            report.best_val_loss = val_loss
            report.best_epoch = epoch
            best_params = state.copy_params()

    state.params = best_params
    return state, report


def train(
    dataset: PatchDataset,
    cfg: RunConfig,
    seed: int | None = None,
    targets: tuple[str, ...] | None = None,
    dtype=np.float32,
) -> tuple[ModelState, TrainReport]:
    """Train a classifier on the dataset's train split, selecting the
    checkpoint with the best validation loss."""
    seed = cfg.training.seed if seed is None else int(seed)
    targets = dataset.targets if targets is None else tuple(targets)
    for t in targets:
        if t not in dataset.quantizers:
            raise ValueError(f"dataset has no target {t!r}")
    if len(dataset.train) == 0 or len(dataset.val) == 0:
        raise ValueError("train and validation splits must be nonempty")

    quantizers = {t: dataset.quantizers[t] for t in targets}
    net_cfg = UNetConfig(
        in_channels=dataset.m,
        class_counts=tuple(q.k for q in quantizers.values()),
        base_channels=cfg.network.base_channels,
        levels=cfg.network.levels,
    )
    state = init_model(
        net_cfg, quantizers, seed,
        feature_stats=dataset.stats, dtype=dtype, mode=dataset.mode,
    )
    train_feats, train_labels = _prepare_split(dataset, "train", targets, dtype)
    val_feats, val_labels = _prepare_split(dataset, "val", targets, dtype)
    return fit(
        state, train_feats, train_labels, val_feats, val_labels,
        cfg.training, seed,
    )


def fine_tune(
    pretrained: ModelState,
    dataset: PatchDataset,
    cfg: RunConfig,
    seed: int | None = None,
    lr_scale: float = 0.1,
    dtype=np.float32,
) -> tuple[ModelState, TrainReport]:
    """Continue training on a new dataset from a pretrained model.

    All layers are reloaded; the final 1x1 classification layer is
    reinitialized when the class counts differ.  The learning rate
    defaults to a tenth of the configured one.
    """
    seed = cfg.training.seed if seed is None else int(seed)
    if dataset.m != pretrained.config.in_channels:
        raise ValueError(
            f"feature count mismatch: dataset M={dataset.m}, "
            f"pretrained expects {pretrained.config.in_channels}"
        )
    targets = pretrained.targets
    for t in targets:
        if t not in dataset.quantizers:
            raise ValueError(f"new dataset lacks pretrained target {t!r}")

    quantizers = {t: dataset.quantizers[t] for t in targets}
    new_counts = tuple(q.k for q in quantizers.values())
    net_cfg = replace(pretrained.config, class_counts=new_counts)

    params = {k: v.copy() for k, v in pretrained.params.items()}
    if new_counts != pretrained.config.class_counts:
        fresh = xavier_init(net_cfg, seed, dtype=dtype)
        params["head.w"] = fresh["head.w"]
        params["head.b"] = fresh["head.b"]
    state = ModelState(
        config=net_cfg,
        params=params,
        velocity={k: np.zeros_like(v) for k, v in params.items()},
        quantizers=quantizers,
        feature_stats=dataset.stats,
        epoch=0,
        seed=seed,
        mode=dataset.mode,
    )

    training = replace(cfg.training, lr=cfg.training.lr * lr_scale)
    train_feats, train_labels = _prepare_split(dataset, "train", targets, dtype)
    val_feats, val_labels = _prepare_split(dataset, "val", targets, dtype)
    return fit(
        state, train_feats, train_labels, val_feats, val_labels, training, seed,
    )


# ---------------------------------------------------------------------------
# inference and metrics

def predict_map(
    state: ModelState,
    features: np.ndarray,
    tile: int = 64,
    overlap: int | None = None,
    grid_offset: tuple[int, int] = (0, 0),
    batch: int = 16,
) -> dict[str, np.ndarray]:
    """Stitch per-tile logits into full-scene height maps (meters).

    Tiles slide with ``tile - overlap`` stride (overlap defaults to
    tile/2); borders are reflection-padded; logits of overlapping tiles
    are averaged before the argmax, and class indices dequantize to
    class-center heights.
    """
    feats = np.asarray(features)
    rows, cols = feats.shape[:2]
    if rows < tile or cols < tile:
        raise ValueError(f"scene {rows}x{cols} is smaller than the tile size {tile}")
    overlap = tile // 2 if overlap is None else int(overlap)
    if not 0 <= overlap < tile:
        raise ValueError(f"overlap must be in [0, tile), got {overlap}")
    stride = tile - overlap
    gr, gc = grid_offset

    if state.feature_stats is not None:
        feats, _ = normalize_features(feats, state.feature_stats)
    feats = feats.astype(np.float32)

    pad_bottom = (-(gr + rows - tile)) % stride
    pad_right = (-(gc + cols - tile)) % stride
    padded = np.pad(feats, ((gr, pad_bottom), (gc, pad_right), (0, 0)), mode="reflect")
    ph, pw = padded.shape[:2]

    k_total = state.config.out_channels
    logit_sum = np.zeros((ph, pw, k_total), dtype=np.float64)
    cover = np.zeros((ph, pw, 1), dtype=np.float64)

    origins = [
        (r, c)
        for r in range(0, ph - tile + 1, stride)
        for c in range(0, pw - tile + 1, stride)
    ]
    for i in range(0, len(origins), batch):
        chunk = origins[i:i + batch]
        xb = np.stack([padded[r:r + tile, c:c + tile] for r, c in chunk])
        logits = unet_forward(state.config, state.params, xb)
        for (r, c), lg in zip(chunk, logits):
            logit_sum[r:r + tile, c:c + tile] += lg
            cover[r:r + tile, c:c + tile] += 1.0

    avg = logit_sum / cover
    avg = avg[gr:gr + rows, gc:gc + cols]

    out = {}
    for target, sl in state.logit_slices().items():
        classes = avg[..., sl].argmax(axis=-1)
        out[target] = state.quantizers[target].dequantize(classes)
    return out


def rmse(prediction: np.ndarray, reference: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Root mean square error over unmasked, finite pixels (meters)."""
    pred = np.asarray(prediction, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {ref.shape}")
    valid = np.isfinite(pred) & np.isfinite(ref)
    if mask is not None:
        valid &= mask
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    d = pred[valid] - ref[valid]
    return float(np.sqrt(np.mean(d * d)))


def bias(prediction: np.ndarray, reference: np.ndarray, mask: np.ndarray | None = None) -> float:
    pred = np.asarray(prediction, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    valid = np.isfinite(pred) & np.isfinite(ref)
    if mask is not None:
        valid &= mask
    if not valid.any():
        raise ValueError("no valid pixels to evaluate")
    return float(np.mean(pred[valid] - ref[valid]))


def joint_histogram(
    prediction: np.ndarray,
    reference: np.ndarray,
    quantizer,
    mask: np.ndarray | None = None,
) -> np.ndarray:
    """counts[reference class, predicted class], K x K."""
    pred_cls = quantizer.quantize(np.asarray(prediction, dtype=np.float64))
    ref_cls = quantizer.quantize(np.asarray(reference, dtype=np.float64))
    valid = (pred_cls >= 0) & (ref_cls >= 0)
    if mask is not None:
        valid &= mask
    k = quantizer.k
    flat = ref_cls[valid].astype(np.int64) * k + pred_cls[valid]
    return np.bincount(flat, minlength=k * k).reshape(k, k)


@dataclass
class EvalReport:
    rmse_m: float
    bias_m: float
    histogram: np.ndarray
    n_pixels: int
    n_masked: int

    def __post_init__(self):
        if int(self.histogram.sum()) != self.n_pixels:
            raise ValueError("histogram total must equal the evaluated pixel count")


def evaluate_prediction(
    prediction: np.ndarray,
    reference: np.ndarray,
    quantizer,
    mask: np.ndarray | None = None,
) -> EvalReport:
    pred = np.asarray(prediction, dtype=np.float64)
    ref = np.asarray(reference, dtype=np.float64)
    valid = np.isfinite(pred) & np.isfinite(ref)
    if mask is not None:
        valid &= mask
    hist = joint_histogram(pred, ref, quantizer, mask=valid)
    return EvalReport(
        rmse_m=rmse(pred, ref, valid),
        bias_m=bias(pred, ref, valid),
        histogram=hist,
        n_pixels=int(valid.sum()),
        n_masked=int(valid.size - valid.sum()),
    )
