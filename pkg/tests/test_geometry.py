import numpy as np
import pytest

from tomoheight.geometry import (
    AcquisitionGeometry,
    afrisar_geometry,
    steering_matrix,
    steering_vector,
    tropisar_geometry,
    vertical_wavenumbers,
)

# 4*pi*b / (lambda * (H/cos(theta)) * sin(theta)) with the TropiSAR row
# b = -14.4879, lambda = 0.7542, H = 3962 m, theta = 35.061 deg
KZ_TROPISAR_B1 = -0.08681680737188556


def test_zero_baseline_means_zero_wavenumber():
    kz = vertical_wavenumbers(tropisar_geometry())
    assert kz[0] == 0.0


def test_tropisar_wavenumber_value():
    kz = vertical_wavenumbers(tropisar_geometry())
    assert kz[1] == pytest.approx(KZ_TROPISAR_B1, rel=1e-12)
    assert kz[1] == pytest.approx(-0.087, abs=5e-4)


def test_doubling_baselines_doubles_wavenumbers():
    g = tropisar_geometry()
    doubled = AcquisitionGeometry(
        baselines=tuple(2 * b for b in g.baselines),
        wavelength=g.wavelength,
        incidence=g.incidence,
        slant_range=g.slant_range,
    )
    np.testing.assert_allclose(
        vertical_wavenumbers(doubled), 2 * vertical_wavenumbers(g), rtol=1e-15
    )


def test_steering_at_zero_height_is_ones():
    a = steering_vector(tropisar_geometry(), 0.0)
    np.testing.assert_array_equal(a, np.ones(6, dtype=complex))


def test_steering_unit_modulus_and_norm():
    g = afrisar_geometry()
    for z in (-7.3, 0.0, 12.5, 61.2):
        a = steering_vector(g, z)
        assert np.max(np.abs(np.abs(a) - 1.0)) <= 1e-15
        assert np.vdot(a, a).real == pytest.approx(g.n_baselines, rel=1e-14)


def test_steering_matrix_rows_match_vectors():
    g = tropisar_geometry()
    zs = np.array([-5.0, 3.2, 40.0])
    mat = steering_matrix(g, zs)
    for i, z in enumerate(zs):
        np.testing.assert_allclose(mat[i], steering_vector(g, z), rtol=1e-15)


@pytest.mark.parametrize("kwargs", [
    dict(baselines=(0.0,), wavelength=1.0, incidence=0.5, slant_range=100.0),
    dict(baselines=(0.0, 1.0), wavelength=-1.0, incidence=0.5, slant_range=100.0),
    dict(baselines=(0.0, 1.0), wavelength=1.0, incidence=2.0, slant_range=100.0),
    dict(baselines=(0.0, 1.0), wavelength=1.0, incidence=0.5, slant_range=0.0),
])
def test_invalid_geometry_rejected(kwargs):
    with pytest.raises(ValueError):
        AcquisitionGeometry(**kwargs)


def test_distinct_baselines_give_distinct_wavenumbers():
    for geom in (tropisar_geometry(), afrisar_geometry()):
        kz = vertical_wavenumbers(geom)
        assert np.all(np.isfinite(kz))
        assert len(np.unique(kz)) == len(kz)
