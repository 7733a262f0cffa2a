"""Per-pixel covariance estimation and the real-valued feature encoding.

A stack pixel is the length phi*N complex vector of all baselines of HH,
then HV, then VV.  Spatial averaging of y y^H over a clipped window gives
the local covariance matrix; its real diagonal plus the real and
imaginary parts of the first row form the 3*phi*N - 2 feature channels
fed to the classifier.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import POLARIZATION_GROUPS
from .geometry import AcquisitionGeometry

@dataclass
class TomoStack:
    """Complex cube [rows, cols, phi*N], channels ordered HH*N, HV*N, VV*N."""

    data: np.ndarray
    mode: str
    geometry: AcquisitionGeometry

    def __post_init__(self):
        phi = len(POLARIZATION_GROUPS[self.mode])
        if self.data.ndim != 3:
            raise ValueError(f"stack cube must be 3-D, got shape {self.data.shape}")
        if self.data.shape[2] != phi * self.geometry.n_baselines:
            raise ValueError(
                f"mode {self.mode} with N={self.geometry.n_baselines} implies "
                f"{phi * self.geometry.n_baselines} channels, cube has "
                f"{self.data.shape[2]}"
            )

    @property
    def shape(self):
        return self.data.shape


@dataclass
class CovarianceField:
    """Hermitian matrix per pixel: complex cube [rows, cols, C, C]."""

    data: np.ndarray
    window: int


@dataclass
class FeatureCube:
    """Real cube [rows, cols, M] plus the name of each channel."""

    data: np.ndarray
    channel_names: list[str]

    @property
    def m(self) -> int:
        return self.data.shape[2]


def channel_indices(mode: str, n_baselines: int, source_mode: str = "FP") -> np.ndarray:
    """Indices of the channels of ``mode`` inside a ``source_mode`` cube."""
    want = POLARIZATION_GROUPS[mode]
    have = POLARIZATION_GROUPS[source_mode]
    missing = [p for p in want if p not in have]
    if missing:
        raise ValueError(
            f"source mode {source_mode} does not contain polarization(s) {missing}"
        )
    idx = []
    for pol in want:
        p = have.index(pol)
        idx.extend(range(p * n_baselines, (p + 1) * n_baselines))
    return np.asarray(idx, dtype=np.intp)


def select_polarizations(stack: TomoStack, mode: str) -> TomoStack:
    """Keep the channel groups of ``mode``, preserving baseline order."""
    if mode == stack.mode:
        return stack
    idx = channel_indices(mode, stack.geometry.n_baselines, source_mode=stack.mode)
    return TomoStack(data=stack.data[:, :, idx], mode=mode, geometry=stack.geometry)


def box_sum(plane: np.ndarray, window: int) -> np.ndarray:
    """Sum of ``plane`` over a centered window clipped at the image edges."""
    half = window // 2
    rows, cols = plane.shape
    s = np.zeros((rows + 1, cols + 1), dtype=plane.dtype)
    np.cumsum(plane, axis=0, out=s[1:, 1:])
    np.cumsum(s[1:, 1:], axis=1, out=s[1:, 1:])
    r0 = np.clip(np.arange(rows) - half, 0, rows)
    r1 = np.clip(np.arange(rows) + half + 1, 0, rows)
    c0 = np.clip(np.arange(cols) - half, 0, cols)
    c1 = np.clip(np.arange(cols) + half + 1, 0, cols)
    return (
        s[np.ix_(r1, c1)] - s[np.ix_(r0, c1)] - s[np.ix_(r1, c0)] + s[np.ix_(r0, c0)]
    )


def window_counts(rows: int, cols: int, window: int) -> np.ndarray:
    """Number of pixels inside the clipped window at each position."""
    return box_sum(np.ones((rows, cols)), window)


def box_mean(plane: np.ndarray, window: int) -> np.ndarray:
    """Mean of ``plane`` over a centered, edge-clipped window."""
    if window == 1:
        return plane.copy()
    rows, cols = plane.shape
    if window > rows or window > cols:
        raise ValueError(f"window {window} exceeds image size {rows}x{cols}")
    if np.iscomplexobj(plane):
        work = plane.astype(np.complex128, copy=False)
    else:
        work = plane.astype(np.float64, copy=False)
    return box_sum(work, window) / window_counts(rows, cols, window)


def _as_looks_cube(data) -> np.ndarray:
    """Accept [rows, cols, C] or [L, rows, cols, C]; return the 4-D form."""
    data = np.asarray(getattr(data, "data", data))
    if data.ndim == 3:
        return data[None]
    if data.ndim == 4:
        return data
    raise ValueError(f"expected a 3-D or 4-D stack, got shape {data.shape}")


def estimate_covariance(stack, window: int) -> CovarianceField:
    """Spatially averaged covariance R(px) = mean_window( y y^H ).

    ``stack`` is a TomoStack, a [rows, cols, C] cube, or an [L, rows,
    cols, C] cube of independent looks (averaged together with the
    window).  Edge pixels use clipped windows.  The result is Hermitian
    by construction with a real non-negative diagonal.
    """
    cube = _as_looks_cube(stack)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 1, got {window}")
    looks, rows, cols, c = cube.shape
    if window > rows or window > cols:
        raise ValueError(f"window {window} exceeds image size {rows}x{cols}")

    cov = np.empty((rows, cols, c, c), dtype=np.complex128)
    for i in range(c):
        yi = cube[..., i]
        # diagonal: real power, kept exactly real
        power = np.mean(yi.real.astype(np.float64) ** 2
                        + yi.imag.astype(np.float64) ** 2, axis=0)
        cov[:, :, i, i] = box_mean(power, window)
        for j in range(i + 1, c):
            prod = np.mean(yi.astype(np.complex128) * np.conj(cube[..., j]), axis=0)
            rij = box_mean(prod, window)
            cov[:, :, i, j] = rij
            cov[:, :, j, i] = np.conj(rij)
    return CovarianceField(data=cov, window=window)


def feature_names(c: int) -> list[str]:
    names = [f"diag_{k}" for k in range(c)]
    names += [f"re_0{k}" for k in range(1, c)]
    names += [f"im_0{k}" for k in range(1, c)]
    return names


def extract_features(cov: CovarianceField | np.ndarray) -> FeatureCube:
    """Encode each R into M = 3*C - 2 real channels.

    Layout: the C real diagonal entries, then Re R[0, k] and Im R[0, k]
    for k = 1..C-1.  The dtype of the input is preserved (complex64 in,
    float32 out), so the encoded entries reproduce the matrix entries
    bitwise.
    """
    data = cov.data if isinstance(cov, CovarianceField) else np.asarray(cov)
    rows, cols, c, c2 = data.shape
    if c != c2:
        raise ValueError(f"covariance cube must be square, got {c}x{c2}")
    real_dtype = np.float32 if data.dtype == np.complex64 else np.float64
    m = 3 * c - 2
    feat = np.empty((rows, cols, m), dtype=real_dtype)
    idx = np.arange(c)
    feat[:, :, :c] = data[:, :, idx, idx].real
    feat[:, :, c:2 * c - 1] = data[:, :, 0, 1:].real
    feat[:, :, 2 * c - 1:] = data[:, :, 0, 1:].imag
    return FeatureCube(data=feat, channel_names=feature_names(c))


def features_from_stack(stack, window: int) -> FeatureCube:
    """Features straight from the stack, never materializing the full field.

    Equivalent to ``extract_features(estimate_covariance(stack, window))``
    but only computes the diagonal and first-row planes; use it for large
    scenes.
    """
    cube = _as_looks_cube(stack)
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 1, got {window}")
    looks, rows, cols, c = cube.shape
    if window > rows or window > cols:
        raise ValueError(f"window {window} exceeds image size {rows}x{cols}")

    m = 3 * c - 2
    feat = np.empty((rows, cols, m), dtype=np.float64)
    for k in range(c):
        yk = cube[..., k]
        power = np.mean(yk.real.astype(np.float64) ** 2
                        + yk.imag.astype(np.float64) ** 2, axis=0)
        feat[:, :, k] = box_mean(power, window)
    y0 = cube[..., 0].astype(np.complex128)
    for k in range(1, c):
        prod = np.mean(y0 * np.conj(cube[..., k]), axis=0)
        r0k = box_mean(prod, window)
        feat[:, :, c + k - 1] = r0k.real
        feat[:, :, 2 * c - 2 + k] = r0k.imag
    return FeatureCube(data=feat, channel_names=feature_names(c))


@dataclass
class FeatureStats:
    """Per-channel standardization statistics, fit on training pixels only."""

    mean: np.ndarray
    std: np.ndarray


def fit_feature_stats(data: np.ndarray) -> FeatureStats:
    """Mean/std per channel over all pixels of ``data`` [..., M]."""
    flat = data.reshape(-1, data.shape[-1]).astype(np.float64)
    return FeatureStats(mean=flat.mean(axis=0), std=flat.std(axis=0))


def normalize_features(
    data: np.ndarray,
    stats: FeatureStats | None = None,
    eps: float = 1e-8,
):
    """Standardize channels: (x - mean) / max(std, eps).

    With ``stats=None`` the statistics are fit on ``data`` itself (do
    this on training pixels only).  Applying saved stats a second time is
    not idempotent; always normalize raw features.
    """
    if stats is None:
        stats = fit_feature_stats(data)
    denom = np.maximum(stats.std, eps)
    out = (data - stats.mean.astype(data.dtype)) / denom.astype(data.dtype)
    return out, stats
