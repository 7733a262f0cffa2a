"""Classical vertical spectrum estimators and peak-based height extraction.

Beamforming and Capon serve as non-learned baselines: scan a steering
vector over a height grid against the local covariance matrix, then read
the ground as the lowest significant local maximum and the canopy top as
the highest height still above a power threshold.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .covariance import estimate_covariance
from .config import POLARIZATION_GROUPS
from .geometry import AcquisitionGeometry, steering_matrix


class SpectralError(ValueError):
    """Degenerate spectrum or covariance the estimators cannot handle."""


@dataclass
class VerticalSpectrum:
    """Power versus height on a uniform grid."""

    z: np.ndarray
    power: np.ndarray
    method: str

    def __post_init__(self):
        if self.z.ndim != 1 or self.z.size != self.power.shape[-1]:
            raise ValueError("height grid and power values must align")
        if np.any(np.diff(self.z) <= 0):
            raise ValueError("height grid must be strictly increasing")


def height_grid(z_min: float = -10.0, z_max: float = 80.0, dz: float = 0.5) -> np.ndarray:
    return np.arange(z_min, z_max + dz / 2, dz)


def _check_hermitian(r: np.ndarray) -> None:
    scale = max(float(np.abs(r).max()), 1e-300)
    if np.abs(r - r.conj().T).max() > 1e-8 * scale:
        raise SpectralError("covariance matrix is not Hermitian")


def beamforming_spectrum(
    r: np.ndarray,
    geom: AcquisitionGeometry,
    z_grid: np.ndarray | None = None,
) -> VerticalSpectrum:
    """P(z) = a(z)^H R a(z) / N^2 over the height grid."""
    r = np.asarray(r)
    _check_hermitian(r)
    z = height_grid() if z_grid is None else np.asarray(z_grid, dtype=float)
    a = steering_matrix(geom, z)  # [Z, N]
    n = r.shape[0]
    p = np.einsum("zn,nm,zm->z", np.conj(a), r, a).real / n**2
    return VerticalSpectrum(z=z, power=p, method="beamforming")


def capon_spectrum(
    r: np.ndarray,
    geom: AcquisitionGeometry,
    z_grid: np.ndarray | None = None,
    loading: float = 1e-3,
) -> VerticalSpectrum:
    """Minimum-variance spectrum 1 / (a^H (R + eps*tr(R)/N*I)^-1 a)."""
    r = np.asarray(r)
    _check_hermitian(r)
    n = r.shape[0]
    r_loaded = r + loading * (np.trace(r).real / n) * np.eye(n)
    z = height_grid() if z_grid is None else np.asarray(z_grid, dtype=float)
    a = steering_matrix(geom, z)
    try:
        x = np.linalg.solve(r_loaded, a.T)  # x[:, z] = Rinv a(z)
    except np.linalg.LinAlgError as exc:
        raise SpectralError(f"covariance singular even after loading: {exc}") from exc
    denom = np.einsum("zn,nz->z", np.conj(a), x).real
    if np.any(denom <= 0):
        raise SpectralError("covariance singular even after loading")
    return VerticalSpectrum(z=z, power=1.0 / denom, method="capon")


def local_maxima(power: np.ndarray) -> np.ndarray:
    """Boolean mask of local maxima; endpoints count against one neighbor."""
    p = np.asarray(power)
    left = np.empty_like(p)
    right = np.empty_like(p)
    left[0] = -np.inf
    left[1:] = p[:-1]
    right[-1] = -np.inf
    right[:-1] = p[1:]
    return (p >= left) & (p >= right)


def extract_heights(
    spec: VerticalSpectrum,
    alpha: float = 0.25,
    beta: float = 0.25,
) -> tuple[float, float]:
    """Read (ground, canopy top) heights off one spectrum.

    Ground: the lowest local maximum with power >= alpha * max(P).
    Canopy top: the highest z with power >= beta * max(P); never below
    the ground.  A perfectly flat spectrum meets the thresholds
    everywhere and returns (z_min, z_max) by convention.
    """
    p = np.asarray(spec.power, dtype=float)
    if p.size == 0:
        raise SpectralError("empty spectrum")
    pmax = p.max()
    if not np.isfinite(pmax) or pmax <= 0:
        raise SpectralError("no peak above threshold")
    if np.ptp(p) <= 1e-12 * pmax:
        return float(spec.z[0]), float(spec.z[-1])

    peaks = local_maxima(p) & (p >= alpha * pmax)
    if not peaks.any():
        raise SpectralError("no peak above threshold")
    z_g = float(spec.z[np.flatnonzero(peaks)[0]])
    above = p >= beta * pmax
    z_c = float(spec.z[np.flatnonzero(above)[-1]])
    return z_g, max(z_c, z_g)


def peak_halfpower_width(spec: VerticalSpectrum, peak_index: int) -> float:
    """Width of a peak at half its power, linearly interpolated."""
    p = np.asarray(spec.power, dtype=float)
    z = spec.z
    half = p[peak_index] / 2.0

    def cross(direction: int) -> float:
        i = peak_index
        while 0 <= i + direction < p.size and p[i + direction] >= half:
            i += direction
        j = i + direction
        if j < 0 or j >= p.size:
            return float(z[i])
        # interpolate between the last point above and first below
        frac = (p[i] - half) / max(p[i] - p[j], 1e-30)
        return float(z[i] + frac * (z[j] - z[i]))

    return cross(+1) - cross(-1)


def _extract_heights_grid(
    z: np.ndarray,
    power: np.ndarray,
    alpha: float,
    beta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized extract_heights over [..., Z] spectra."""
    p = power
    pmax = p.max(axis=-1, keepdims=True)
    left = np.concatenate([np.full(p.shape[:-1] + (1,), -np.inf), p[..., :-1]], axis=-1)
    right = np.concatenate([p[..., 1:], np.full(p.shape[:-1] + (1,), -np.inf)], axis=-1)
    peaks = (p >= left) & (p >= right) & (p >= alpha * pmax)
    first = peaks.argmax(axis=-1)
    z_g = z[first]

    above = p >= beta * pmax
    last = p.shape[-1] - 1 - above[..., ::-1].argmax(axis=-1)
    z_c = np.maximum(z[last], z_g)

    flat = np.ptp(p, axis=-1) <= 1e-12 * pmax[..., 0]
    z_g = np.where(flat, z[0], z_g)
    z_c = np.where(flat, z[-1], z_c)
    return z_g, z_c


def baseline_height_maps(
    data: np.ndarray,
    geom: AcquisitionGeometry,
    mode: str,
    window: int,
    method: str = "beamforming",
    z_grid: np.ndarray | None = None,
    alpha: float = 0.25,
    beta: float = 0.25,
    loading: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel (ground, canopy top) maps from spectral peak extraction.

    One N x N covariance is estimated per polarization with the given
    averaging window; the per-polarization spectra are averaged
    incoherently before peak extraction.
    """
    data = np.asarray(getattr(data, "data", data))
    z = height_grid() if z_grid is None else np.asarray(z_grid, dtype=float)
    a = steering_matrix(geom, z)  # [Z, N]
    n = geom.n_baselines
    phi = len(POLARIZATION_GROUPS[mode])
    rows, cols = data.shape[-3:-1]

    power = np.zeros((rows, cols, z.size))
    for p_i in range(phi):
        sub = data[..., p_i * n:(p_i + 1) * n]
        cov = estimate_covariance(sub, window).data  # [rows, cols, N, N]
        if method == "beamforming":
            power += np.einsum(
                "zn,rcnm,zm->rcz", np.conj(a), cov, a
            ).real / n**2
        elif method == "capon":
            tr = np.trace(cov, axis1=-2, axis2=-1).real / n
            loaded = cov + loading * tr[..., None, None] * np.eye(n)
            inv = np.linalg.inv(loaded)
            denom = np.einsum("zn,rcnm,zm->rcz", np.conj(a), inv, a).real
            power += 1.0 / np.maximum(denom, 1e-30)
        else:
            raise ValueError(f"unknown spectral method {method!r}")
    power /= phi

    z_g, z_c = _extract_heights_grid(z, power, alpha, beta)
    return z_g, z_c
