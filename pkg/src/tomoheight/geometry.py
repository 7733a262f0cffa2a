"""Acquisition geometry: baselines to vertical wavenumbers and steering vectors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AcquisitionGeometry:
    """Multi-baseline viewing geometry of one tomographic stack.

    baselines are perpendicular track offsets in meters, incidence is in
    radians, slant_range in meters.
    """

    baselines: tuple[float, ...]
    wavelength: float
    incidence: float
    slant_range: float

    def __post_init__(self):
        object.__setattr__(self, "baselines", tuple(float(b) for b in self.baselines))
        if len(self.baselines) < 2:
            raise ValueError("need at least 2 baselines")
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if not 0.0 < self.incidence < np.pi / 2:
            raise ValueError("incidence must be in (0, pi/2) radians")
        if self.slant_range <= 0:
            raise ValueError("slant range must be positive")

    @property
    def n_baselines(self) -> int:
        return len(self.baselines)


def vertical_wavenumbers(geom: AcquisitionGeometry) -> np.ndarray:
    """Per-baseline phase-to-height rates k_z = 4*pi*b / (lambda*r*sin(theta))."""
    b = np.asarray(geom.baselines, dtype=float)
    return 4.0 * np.pi * b / (geom.wavelength * geom.slant_range * np.sin(geom.incidence))


def steering_vector(geom: AcquisitionGeometry, z: float) -> np.ndarray:
    """Array response exp(i * k_z,n * z) of a scatterer at height z (meters)."""
    return np.exp(1j * vertical_wavenumbers(geom) * float(z))


def steering_matrix(geom: AcquisitionGeometry, z_grid: np.ndarray) -> np.ndarray:
    """Stacked steering vectors, shape [len(z_grid), N]."""
    kz = vertical_wavenumbers(geom)
    z = np.asarray(z_grid, dtype=float)
    return np.exp(1j * np.outer(z, kz))


# Airborne P-band campaign parameters used by the scene profiles.
TROPISAR_BASELINES = (0.0, -14.4879, -30.1163, -43.7343, -60.0632, -74.9683)
AFRISAR_BASELINES = (20.0, 0.0, -20.0, -40.0, -60.0, -80.0)


def tropisar_geometry() -> AcquisitionGeometry:
    """TropiSAR stack over Paracou: 0.7542 m wavelength, 3962 m flight height."""
    theta = np.deg2rad(35.061)
    return AcquisitionGeometry(
        baselines=TROPISAR_BASELINES,
        wavelength=0.7542,
        incidence=theta,
        slant_range=3962.0 / np.cos(theta),
    )


def afrisar_geometry() -> AcquisitionGeometry:
    """AfriSAR stack over Lope: 0.69 m wavelength, 6096 m flight height.

    The campaign's incidence spans 25-35 degrees; the scene simulator uses
    the 30 degree midpoint.
    """
    theta = np.deg2rad(30.0)
    return AcquisitionGeometry(
        baselines=AFRISAR_BASELINES,
        wavelength=0.69,
        incidence=theta,
        slant_range=6096.0 / np.cos(theta),
    )
