"""Synthetic multi-baseline Pol-TomoSAR scenes with known height truth.

Each pixel is modeled as a ground return at the terrain height plus an
exponentially extinction-weighted scattering volume of the canopy height,
the usual two-layer random-volume-over-ground picture, with additive
white noise.  Polarimetric structure comes from fixed per-channel power
weights and inter-channel coherences, so full covariance matrices stay
positive semidefinite by construction.  Speckle is drawn as circular
complex Gaussian noise from the per-pixel truth covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .config import PROFILES
from .covariance import TomoStack, channel_indices
from .geometry import (
    AcquisitionGeometry,
    afrisar_geometry,
    steering_matrix,
    steering_vector,
    tropisar_geometry,
    vertical_wavenumbers,
)

# 0.1 dB/m one-way extinction expressed in nepers per meter
DEFAULT_EXTINCTION = 0.1 / (10.0 * np.log10(np.e))
VOLUME_SLICE_M = 0.5  # volume integral discretization, half the 1 m label step
_SAMPLE_BLOCK_ROWS = 64  # fixed so results never depend on worker layout


@dataclass(frozen=True)
class PolarimetricModel:
    """Per-channel power weights and inter-channel coherences (HH, HV, VV).

    Weights average to 1 so the per-pixel trace stays phi*N*(P_g+P_v+s2).
    """

    ground_weights: tuple[float, float, float] = (1.2, 0.3, 1.5)
    volume_weights: tuple[float, float, float] = (0.9, 1.2, 0.9)
    copol_coherence: float = 0.8
    crosspol_coherence: float = 0.4

    def coherence_matrix(self) -> np.ndarray:
        rho_co = self.copol_coherence
        rho_x = self.crosspol_coherence
        return np.array(
            [[1.0, rho_x, rho_co],
             [rho_x, 1.0, rho_x],
             [rho_co, rho_x, 1.0]]
        )

    def ground_matrix(self) -> np.ndarray:
        w = np.sqrt(np.asarray(self.ground_weights))
        return self.coherence_matrix() * np.outer(w, w)

    def volume_matrix(self) -> np.ndarray:
        w = np.sqrt(np.asarray(self.volume_weights))
        return self.coherence_matrix() * np.outer(w, w)


@dataclass
class SceneTruth:
    """Known per-pixel state of a simulated scene (all maps share a grid)."""

    ground: np.ndarray        # terrain elevation, meters
    canopy: np.ndarray        # canopy height above ground, meters, >= 0
    ground_power: np.ndarray
    volume_power: np.ndarray
    extinction: float = DEFAULT_EXTINCTION  # 1/m
    noise_power: float = 0.05
    # optional decorrelation between acquisitions: coherence**|m - n|
    # damping of cross-baseline terms; 1.0 = fully coherent stack
    temporal_coherence: float = 1.0
    pol_model: PolarimetricModel = field(default_factory=PolarimetricModel)

    def __post_init__(self):
        shapes = {a.shape for a in
                  (self.ground, self.canopy, self.ground_power, self.volume_power)}
        if len(shapes) != 1:
            raise ValueError(f"truth maps must share one grid, got {shapes}")
        if np.any(self.canopy < 0):
            raise ValueError("canopy height must be >= 0 everywhere")
        if np.any(self.ground_power < 0) or np.any(self.volume_power < 0):
            raise ValueError("powers must be >= 0")
        if not 0.0 < self.temporal_coherence <= 1.0:
            raise ValueError("temporal coherence must be in (0, 1]")

    @property
    def shape(self):
        return self.ground.shape


def volume_slice_heights(max_height: float, dz: float = VOLUME_SLICE_M) -> np.ndarray:
    """Midpoints of the discretized volume integral, 0.5 m slices."""
    n = int(np.ceil(max_height / dz - 1e-9))
    return (np.arange(n) + 0.5) * dz


def volume_profile_weights(
    canopy_height: float,
    extinction: float,
    incidence: float,
    dz: float = VOLUME_SLICE_M,
) -> tuple[np.ndarray, np.ndarray]:
    """Slice heights and unit-sum weights of exp(2*kappa*z/cos(theta))."""
    z = volume_slice_heights(canopy_height, dz)
    if z.size == 0:
        return z, z
    w = np.exp(2.0 * extinction * z / np.cos(incidence))
    return z, w / w.sum()


def temporal_coherence_kernel(n: int, coherence: float) -> np.ndarray:
    """Toeplitz coherence**|m - n| damping, PSD for coherence in (0, 1]."""
    idx = np.arange(n)
    return coherence ** np.abs(idx[:, None] - idx[None, :]).astype(float)


def pixel_covariance_truth(
    geom: AcquisitionGeometry,
    z_ground: float,
    canopy_height: float,
    ground_power: float,
    volume_power: float,
    extinction: float = DEFAULT_EXTINCTION,
    noise_power: float = 0.05,
    mode: str = "FP",
    pol_model: PolarimetricModel | None = None,
    temporal_coherence: float = 1.0,
) -> np.ndarray:
    """Analytic truth covariance of one pixel, Hermitian PSD [phi*N, phi*N].

    Per polarization block pair (p, q):
    G[p,q] * a(z_g) a(z_g)^H + V[p,q] * sum_j w_j a(z_g+z_j) a(z_g+z_j)^H
    plus noise_power * I on the diagonal, with unit-sum volume weights w.
    A temporal coherence below 1 damps cross-baseline terms by
    coherence**|m - n| (a Schur product with a PSD kernel, so the result
    stays PSD).
    """
    pol_model = pol_model or PolarimetricModel()
    n = geom.n_baselines
    a_g = steering_vector(geom, z_ground)
    ground_outer = np.outer(a_g, np.conj(a_g))

    z, w = volume_profile_weights(canopy_height, extinction, geom.incidence)
    if z.size:
        a_v = steering_matrix(geom, z_ground + z)  # [J, N]
        volume_outer = np.einsum("j,jm,jn->mn", w, a_v, np.conj(a_v))
    else:
        volume_outer = np.zeros((n, n), dtype=complex)

    if temporal_coherence != 1.0:
        kernel = temporal_coherence_kernel(n, temporal_coherence)
        ground_outer = ground_outer * kernel
        volume_outer = volume_outer * kernel

    g_mat = ground_power * pol_model.ground_matrix()
    v_mat = volume_power * pol_model.volume_matrix()
    r_full = (
        np.kron(g_mat, ground_outer)
        + np.kron(v_mat, volume_outer)
        + noise_power * np.eye(3 * n)
    )
    idx = channel_indices(mode, n)
    return r_full[np.ix_(idx, idx)]


def truth_covariance_block(
    geom: AcquisitionGeometry,
    truth: SceneTruth,
    rows: slice,
    mode: str = "FP",
) -> np.ndarray:
    """Vectorized truth covariances for a block of rows: [r, c, C, C]."""
    n = geom.n_baselines
    zg = truth.ground[rows]
    hv = truth.canopy[rows]
    pg = truth.ground_power[rows]
    pv = truth.volume_power[rows]
    shape = zg.shape

    kz = vertical_wavenumbers(geom)
    a_g = np.exp(1j * zg[..., None] * kz)  # [..., N]
    ground_outer = a_g[..., :, None] * np.conj(a_g[..., None, :])

    # The unit-sum slice weights depend only on the slice count
    # J = ceil(h/dz) (same rule as pixel_covariance_truth), so the
    # ground-relative volume matrix is a small per-J lookup table.
    z = volume_slice_heights(float(hv.max()) if hv.size else 0.0)
    if z.size:
        base_w = np.exp(2.0 * truth.extinction * z / np.cos(geom.incidence))
        a_v = np.exp(1j * np.multiply.outer(z, kz))  # [J, N]
        slice_outer = a_v[:, :, None] * np.conj(a_v[:, None, :])  # [J, N, N]
        cum = np.cumsum(base_w[:, None, None] * slice_outer, axis=0)
        cum_w = np.cumsum(base_w)
        table = np.zeros((z.size + 1, n, n), dtype=complex)
        table[1:] = cum / cum_w[:, None, None]
        n_slices = np.ceil(hv / VOLUME_SLICE_M - 1e-9).astype(int)
        rel_volume = table[n_slices]
        # shift the volume up to the local ground: diag(a_g) M diag(a_g)^H
        volume_outer = (
            a_g[..., :, None] * rel_volume * np.conj(a_g[..., None, :])
        )
    else:
        volume_outer = np.zeros(shape + (n, n), dtype=complex)

    if truth.temporal_coherence != 1.0:
        kernel = temporal_coherence_kernel(n, truth.temporal_coherence)
        ground_outer = ground_outer * kernel
        volume_outer = volume_outer * kernel

    g_mat = truth.pol_model.ground_matrix()
    v_mat = truth.pol_model.volume_matrix()
    c_full = 3 * n
    out = np.zeros(shape + (c_full, c_full), dtype=np.complex128)
    for p in range(3):
        for q in range(3):
            blk = (
                g_mat[p, q] * pg[..., None, None] * ground_outer
                + v_mat[p, q] * pv[..., None, None] * volume_outer
            )
            out[..., p * n:(p + 1) * n, q * n:(q + 1) * n] = blk
    out[..., np.arange(c_full), np.arange(c_full)] += truth.noise_power
    idx = channel_indices(mode, n)
    return out[..., idx[:, None], idx[None, :]]


def _covariance_factor(cov: np.ndarray) -> np.ndarray:
    """A with A A^H = cov: Cholesky when positive definite, otherwise the
    eigendecomposition square root (tolerates PSD rank loss)."""
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        vals = np.clip(vals, 0.0, None)
        return vecs * np.sqrt(vals)[..., None, :]


def _block_seed(seed: int, block_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(block_index)]))


def _sample_block(cov_block: np.ndarray, looks: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``looks`` circular complex Gaussian vectors per pixel."""
    shape = cov_block.shape[:-2]
    c = cov_block.shape[-1]
    root = _covariance_factor(cov_block)
    u = rng.standard_normal((looks,) + shape + (c, 2))
    u = (u[..., 0] + 1j * u[..., 1]) / np.sqrt(2.0)
    return np.einsum("...ij,l...j->l...i", root, u)


def sample_stack(cov: np.ndarray, looks: int, seed: int) -> np.ndarray:
    """i.i.d. CN(0, R) realizations per pixel: [looks, rows, cols, C].

    Draws are blocked over fixed 64-row stripes with per-block seeds
    derived from (seed, block index), so the output is independent of how
    the work is scheduled.
    """
    cov = np.asarray(cov)
    if cov.ndim != 4 or cov.shape[-1] != cov.shape[-2]:
        raise ValueError(f"expected [rows, cols, C, C] covariances, got {cov.shape}")
    herm_err = np.abs(cov - np.conj(np.swapaxes(cov, -1, -2))).max()
    if herm_err > 1e-9 * max(np.abs(cov).max(), 1e-300):
        raise ValueError("covariances are not Hermitian")
    rows = cov.shape[0]
    out = np.empty((looks,) + cov.shape[:2] + (cov.shape[-1],), dtype=np.complex64)
    for bi, r0 in enumerate(range(0, rows, _SAMPLE_BLOCK_ROWS)):
        r1 = min(r0 + _SAMPLE_BLOCK_ROWS, rows)
        rng = _block_seed(seed, bi)
        out[:, r0:r1] = _sample_block(cov[r0:r1], looks, rng).astype(np.complex64)
    return out


def smooth_field(
    rng: np.random.Generator,
    shape: tuple[int, int],
    sigma: float,
    lo: float,
    hi: float,
) -> np.ndarray:
    """Smooth random field rescaled to exactly span [lo, hi]."""
    noise = rng.standard_normal(shape)
    f = gaussian_filter(noise, sigma=sigma, mode="reflect")
    fmin, fmax = f.min(), f.max()
    if fmax - fmin < 1e-12:
        return np.full(shape, 0.5 * (lo + hi))
    return lo + (hi - lo) * (f - fmin) / (fmax - fmin)


# profile -> (geometry factory, terrain range m, canopy range m, coherence)
_PROFILE_SPECS = {
    # Canopy envelopes follow the two campaign sites. Terrain is the
    # residual relative to the flattening reference and is kept small
    # against the ~60-75 m height-ambiguity span of the stacks; the two
    # sites deliberately occupy different terrain ranges (the second is
    # hillier and centered on its reference) so cross-site transfer is
    # nontrivial. Repeat-pass stacks are mildly decorrelated.
    "paracou-like": (tropisar_geometry, (2.0, 10.0), (0.0, 60.0), 0.95),
    "lope-like": (afrisar_geometry, (-6.0, 6.0), (30.0, 50.0), 0.95),
}


def make_scene(
    profile: str,
    size: int,
    seed: int,
    noise_power: float = 0.05,
) -> tuple[TomoStack, SceneTruth]:
    """Simulate a square scene of a given profile: (stack, truth).

    The returned stack is a single-look complex cube [size, size, 3*N]
    (full polarization); reduce it with
    :func:`tomoheight.covariance.select_polarizations`.
    """
    if profile not in _PROFILE_SPECS:
        raise ValueError(f"unknown profile {profile!r}; expected one of {PROFILES}")
    geom_fn, ground_range, canopy_range, coherence = _PROFILE_SPECS[profile]
    geom = geom_fn()

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0]))
    sigma_terrain = max(size / 6.0, 2.0)
    sigma_canopy = max(size / 10.0, 2.0)
    sigma_power = max(size / 8.0, 2.0)
    truth = SceneTruth(
        ground=smooth_field(rng, (size, size), sigma_terrain, *ground_range),
        canopy=smooth_field(rng, (size, size), sigma_canopy, *canopy_range),
        # under dense canopy the attenuated ground return sits below the
        # volume return, which is what makes spectral ground-finding hard
        ground_power=smooth_field(rng, (size, size), sigma_power, 0.4, 1.0),
        volume_power=smooth_field(rng, (size, size), sigma_power, 0.8, 1.4),
        noise_power=noise_power,
        temporal_coherence=coherence,
    )

    data = np.empty((size, size, 3 * geom.n_baselines), dtype=np.complex64)
    for bi, r0 in enumerate(range(0, size, _SAMPLE_BLOCK_ROWS)):
        r1 = min(r0 + _SAMPLE_BLOCK_ROWS, size)
        cov = truth_covariance_block(geom, truth, slice(r0, r1))
        blk_rng = _block_seed(seed, bi)
        data[r0:r1] = _sample_block(cov, 1, blk_rng)[0].astype(np.complex64)

    return TomoStack(data=data, mode="FP", geometry=geom), truth
