"""Reference alignment, height quantization, patch tiling and splits.

Reference maps are box-averaged with the same window as the covariance
estimate, quantized to 1 m classes, and cut into W x W patches.  A
spatial rectangle is held out for testing; the remaining patches are
shuffled into train (80%) and validation (20%).  No-data pixels carry
the label -1 and are excluded from losses and metrics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .covariance import FeatureStats, box_sum, fit_feature_stats
from . import tenio

IGNORE_LABEL = -1


@dataclass(frozen=True)
class HeightQuantizer:
    """Uniform height classes: class(h) = clamp(floor((h - h_min)/step), 0, K-1)."""

    h_min: float
    step: float = 1.0
    k: int = 2

    def __post_init__(self):
        if self.step <= 0:
            raise ValueError("step must be > 0")
        if self.k < 2:
            raise ValueError("K must be >= 2")

    @classmethod
    def from_range(cls, lo: float, hi: float, step: float = 1.0) -> "HeightQuantizer":
        """Cover [lo, hi] with the smallest class count, snapped to the step grid."""
        h_min = np.floor(lo / step) * step
        k = int(np.ceil((hi - h_min) / step - 1e-9))
        return cls(h_min=float(h_min), step=float(step), k=max(k, 2))

    def quantize(self, heights: np.ndarray) -> np.ndarray:
        """Class indices (int32); NaN pixels map to the ignore label -1."""
        h = np.asarray(heights, dtype=np.float64)
        cls = np.floor((h - self.h_min) / self.step)
        cls = np.clip(cls, 0, self.k - 1)
        out = np.where(np.isnan(h), IGNORE_LABEL, cls)
        return out.astype(np.int32)

    def dequantize(self, labels: np.ndarray) -> np.ndarray:
        """Class centers h_min + (k + 0.5) * step; ignore labels become NaN."""
        lab = np.asarray(labels)
        h = self.h_min + (lab + 0.5) * self.step
        return np.where(lab < 0, np.nan, h)

    def to_dict(self) -> dict:
        return {"h_min": self.h_min, "step": self.step, "K": self.k}

    @classmethod
    def from_dict(cls, d: dict) -> "HeightQuantizer":
        return cls(h_min=d["h_min"], step=d["step"], k=d["K"])


def average_reference(height_map: np.ndarray, window: int) -> np.ndarray:
    """Box-average a reference map, NaN-aware, with edge-clipped windows.

    NaN marks no-data; such pixels are excluded from every mean, and a
    window with no valid pixel at all stays NaN.
    """
    if window == 1:
        return np.asarray(height_map, dtype=np.float64).copy()
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 1, got {window}")
    h = np.asarray(height_map, dtype=np.float64)
    valid = np.isfinite(h)
    sums = box_sum(np.where(valid, h, 0.0), window)
    counts = box_sum(valid.astype(np.float64), window)
    with np.errstate(invalid="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1.0), np.nan)
    return out


@dataclass
class PatchSet:
    """Aligned feature and label patches plus their origins.

    features: [P, W, W, M] float32.  labels: {target: [P, W, W] int32}
    with -1 marking no-data.  origins: [P, 2] top-left (row, col).
    """

    features: np.ndarray
    labels: dict[str, np.ndarray]
    origins: np.ndarray
    split: str = ""

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def w(self) -> int:
        return self.features.shape[1]

    @property
    def m(self) -> int:
        return self.features.shape[3]

    def valid_mask(self) -> np.ndarray:
        """Pixels valid in every target's label patch."""
        mask = np.ones(self.features.shape[:3], dtype=bool)
        for lab in self.labels.values():
            mask &= lab >= 0
        return mask

    def subset(self, index: np.ndarray, split: str = "") -> "PatchSet":
        return PatchSet(
            features=self.features[index],
            labels={t: lab[index] for t, lab in self.labels.items()},
            origins=self.origins[index],
            split=split or self.split,
        )


def tile_patches(
    features: np.ndarray,
    labels: dict[str, np.ndarray],
    w: int,
    stride: int | None = None,
) -> PatchSet:
    """Cut aligned W x W patches on a stride grid; partial border tiles
    are dropped (inference uses reflection-padded sliding tiles instead)."""
    stride = w if stride is None else int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    rows, cols = features.shape[:2]
    if rows < w or cols < w:
        raise ValueError(f"image {rows}x{cols} is smaller than the patch size {w}")

    r_origins = range(0, rows - w + 1, stride)
    c_origins = range(0, cols - w + 1, stride)
    origins = np.array([(r, c) for r in r_origins for c in c_origins], dtype=np.int64)
    feats = np.stack(
        [features[r:r + w, c:c + w] for r, c in origins]
    ).astype(np.float32)
    labs = {
        t: np.stack([lab[r:r + w, c:c + w] for r, c in origins]).astype(np.int32)
        for t, lab in labels.items()
    }
    return PatchSet(features=feats, labels=labs, origins=origins)


def split_patches(
    patches: PatchSet,
    test_rect: tuple[int, int, int, int],
    seed: int,
    image_shape: tuple[int, int],
    train_fraction: float = 0.8,
) -> dict[str, PatchSet]:
    """Hold out the patches inside a rectangle, shuffle the rest 80/20.

    ``test_rect`` is (row0, col0, height, width) in pixels, aligned to
    the patch grid.  Returns {"train", "val", "test"} with pairwise
    disjoint patch origins.
    """
    r0, c0, rh, cw = test_rect
    rows, cols = image_shape
    if r0 < 0 or c0 < 0 or r0 + rh > rows or c0 + cw > cols:
        raise ValueError(
            f"test rectangle {test_rect} falls outside the {rows}x{cols} image"
        )
    w = patches.w
    inside = (
        (patches.origins[:, 0] >= r0)
        & (patches.origins[:, 0] + w <= r0 + rh)
        & (patches.origins[:, 1] >= c0)
        & (patches.origins[:, 1] + w <= c0 + cw)
    )
    test_idx = np.flatnonzero(inside)
    rest = np.flatnonzero(~inside)
    if rest.size == 0:
        raise ValueError("test rectangle covers every patch; train split is empty")

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    order = rng.permutation(rest.size)
    rest = rest[order]
    n_train = int(round(train_fraction * rest.size))
    n_train = min(max(n_train, 1), rest.size)
    return {
        "train": patches.subset(rest[:n_train], "train"),
        "val": patches.subset(rest[n_train:], "val"),
        "test": patches.subset(test_idx, "test"),
    }


@dataclass
class PatchDataset:
    """Train/val/test patches plus everything needed to train on them."""

    splits: dict[str, PatchSet]
    quantizers: dict[str, HeightQuantizer]
    stats: FeatureStats
    mode: str
    window: int
    seed: int
    image_shape: tuple[int, int]

    @property
    def train(self) -> PatchSet:
        return self.splits["train"]

    @property
    def val(self) -> PatchSet:
        return self.splits["val"]

    @property
    def test(self) -> PatchSet:
        return self.splits["test"]

    @property
    def targets(self) -> tuple[str, ...]:
        return tuple(self.quantizers.keys())

    @property
    def m(self) -> int:
        return self.train.m


def build_dataset(
    features: np.ndarray,
    references: dict[str, np.ndarray],
    window: int,
    w: int,
    test_rect: tuple[int, int, int, int],
    seed: int,
    stride: int | None = None,
    quantizers: dict[str, HeightQuantizer] | None = None,
    step: float = 1.0,
    mode: str = "FP",
) -> PatchDataset:
    """Full dataset construction from a feature cube and reference maps.

    References are averaged with the covariance window, quantized (class
    ranges derived from the averaged maps when no quantizer is given),
    tiled and split.  Feature statistics are fit on training pixels only.
    """
    averaged = {t: average_reference(ref, window) for t, ref in references.items()}
    if quantizers is None:
        quantizers = {}
        for t, ref in averaged.items():
            finite = ref[np.isfinite(ref)]
            if finite.size == 0:
                raise ValueError(f"reference {t!r} has no valid pixels")
            quantizers[t] = HeightQuantizer.from_range(
                float(finite.min()), float(finite.max()), step
            )
    labels = {t: quantizers[t].quantize(averaged[t]) for t in averaged}

    patches = tile_patches(features, labels, w, stride)
    splits = split_patches(patches, test_rect, seed, features.shape[:2])
    train_feats = splits["train"].features
    stats = fit_feature_stats(train_feats[splits["train"].valid_mask()])
    return PatchDataset(
        splits=splits,
        quantizers=quantizers,
        stats=stats,
        mode=mode,
        window=window,
        seed=seed,
        image_shape=features.shape[:2],
    )


def save_dataset(ds: PatchDataset, out_dir) -> None:
    """Persist feature/label cubes per split plus ``patches.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = list(ds.targets)
    meta = {
        "w": ds.train.w,
        "m": ds.m,
        "mode": ds.mode,
        "window": ds.window,
        "seed": ds.seed,
        "image_shape": list(ds.image_shape),
        "targets": targets,
        "quantizers": {t: q.to_dict() for t, q in ds.quantizers.items()},
        "stats": {"mean": ds.stats.mean.tolist(), "std": ds.stats.std.tolist()},
        "origins": {s: ps.origins.tolist() for s, ps in ds.splits.items()},
    }
    for split, ps in ds.splits.items():
        tenio.write_tensor(
            ps.features, out / f"features_{split}.ten",
            name="features", units="normalized-power",
        )
        lab = np.stack([ps.labels[t] for t in targets], axis=-1)
        tenio.write_tensor(
            lab, out / f"labels_{split}.ten", name="labels", units="class",
        )
    (out / "patches.json").write_text(json.dumps(meta, indent=1) + "\n")


def load_dataset(in_dir) -> PatchDataset:
    src = Path(in_dir)
    meta = json.loads((src / "patches.json").read_text())
    targets = meta["targets"]
    splits = {}
    for split in ("train", "val", "test"):
        feats = tenio.read_tensor(src / f"features_{split}.ten")
        lab = tenio.read_tensor(src / f"labels_{split}.ten")
        splits[split] = PatchSet(
            features=feats,
            labels={t: lab[..., i] for i, t in enumerate(targets)},
            origins=np.asarray(meta["origins"][split], dtype=np.int64).reshape(-1, 2),
            split=split,
        )
    return PatchDataset(
        splits=splits,
        quantizers={
            t: HeightQuantizer.from_dict(d) for t, d in meta["quantizers"].items()
        },
        stats=FeatureStats(
            mean=np.asarray(meta["stats"]["mean"]),
            std=np.asarray(meta["stats"]["std"]),
        ),
        mode=meta["mode"],
        window=meta["window"],
        seed=meta["seed"],
        image_shape=tuple(meta["image_shape"]),
    )
