import math

import numpy as np
import pytest

from raylens import autodiff as ad
from raylens import optics
from raylens.errors import DomainError, LensFileError
from raylens.optics import (
    AIR,
    MATERIALS,
    ApertureStop,
    AsphericSurface,
    LensSystem,
    Material,
    Sensor,
    refractive_index,
    sag_profile,
)


def test_air_index_is_exactly_one():
    for wl in (0.4861, 0.5893, 0.6563, 0.75):
        assert refractive_index(AIR, wl) == 1.0


def test_pmma_cauchy_fit():
    pmma = MATERIALS["pmma"]
    assert pmma.cauchy_a == pytest.approx(1.4789, abs=2e-4)
    assert pmma.cauchy_b == pytest.approx(0.004484, abs=2e-6)
    assert refractive_index(pmma, 0.5876) == pytest.approx(1.4918, abs=1e-3)


def test_pc_normal_dispersion():
    pc = MATERIALS["pc"]
    assert pc.cauchy_a == pytest.approx(1.5558, abs=2e-4)
    assert pc.cauchy_b == pytest.approx(0.010248, abs=1e-5)
    assert refractive_index(pc, 0.6563) < refractive_index(pc, 0.4861)


def test_dispersion_ordering_all_glasses():
    for name, mat in MATERIALS.items():
        if mat.is_air:
            continue
        n_f = refractive_index(mat, 0.4861)
        n_d = refractive_index(mat, 0.5876)
        n_c = refractive_index(mat, 0.6563)
        assert n_f > n_d > n_c, name


def test_wavelength_band_check():
    with pytest.raises(DomainError):
        refractive_index(MATERIALS["pmma"], 0.3)
    with pytest.raises(DomainError):
        refractive_index(AIR, 0.9)


def test_bad_material_rejected():
    with pytest.raises(ValueError):
        Material("weird", 1.5, -0.01)
    with pytest.raises(LensFileError):
        optics.get_material("unobtainium")


def _surface(c=0.0, k=0.0, a4=0.0, a6=0.0, a8=0.0, a10=0.0, sd=2.0):
    return AsphericSurface(c, 0.0, sd, AIR, conic=k, a4=a4, a6=a6, a8=a8, a10=a10)


def test_sag_flat():
    s = _surface(c=0.0)
    for r2 in (0.0, 0.5, 4.0):
        assert s.sag(r2) == 0.0


def test_sag_spherical_example():
    s = _surface(c=0.02)
    assert s.sag(1.0) == pytest.approx(0.0100010, abs=1e-7)
    # sanity: close to the paraxial r^2/(2R) = 0.01
    assert s.sag(1.0) == pytest.approx(0.01, abs=2e-6)


def test_sag_with_a4_term():
    s = _surface(c=0.02, a4=1e-4)
    assert s.sag(1.0) == pytest.approx(0.0101010, abs=1e-7)


def test_normal_on_axis_and_flat():
    assert _surface(c=0.05, a4=1e-3).normal(0.0, 0.0) == (0.0, 0.0, 1.0)
    nx, ny, nz = _surface(c=0.0).normal(0.7, -0.3)
    assert (nx, ny, nz) == (0.0, 0.0, 1.0)


def test_normal_matches_analytic_slope():
    s = _surface(c=0.02)
    dzdx = 0.02 * 1.0 / math.sqrt(1.0 - 0.02**2 * 1.0)
    norm = math.sqrt(1.0 + dzdx * dzdx)
    nx, ny, nz = s.normal(1.0, 0.0)
    assert nx == pytest.approx(-dzdx / norm, rel=1e-12)
    assert ny == 0.0
    assert nz == pytest.approx(1.0 / norm, rel=1e-12)


def test_normal_rotational_symmetry():
    s = _surface(c=0.03, k=-0.5, a4=2e-4, a6=-1e-5)
    r = 1.3
    nx0, ny0, nz0 = s.normal(r, 0.0)
    for phi in (0.4, 1.1, 2.9, -2.2):
        x, y = r * math.cos(phi), r * math.sin(phi)
        nx, ny, nz = s.normal(x, y)
        assert nx == pytest.approx(nx0 * math.cos(phi) - ny0 * math.sin(phi), abs=1e-12)
        assert ny == pytest.approx(nx0 * math.sin(phi) + ny0 * math.cos(phi), abs=1e-12)
        assert nz == pytest.approx(nz0, abs=1e-14)


def test_sag_gradient_wrt_coefficients():
    r2 = 1.44

    def f(v):
        sag, _ = sag_profile(v[0], v[1], v[2], v[3], v[4], v[5], r2)
        return sag

    x0 = [0.02, -0.3, 1e-4, -2e-5, 3e-6, -1e-7]
    assert ad.gradient_check(f, x0, h=1e-7) <= 1e-6


def test_sag_gradient_wrt_r2():
    s = _surface(c=0.04, k=0.2, a4=5e-4, a6=1e-5)

    def f(v):
        return s.sag(v[0])

    r2 = 1.21
    assert ad.gradient_check(f, [r2], h=1e-7) <= 1e-6
    # slope output agrees with the r2 derivative
    tape = ad.Tape()
    r2v = tape.leaf(r2)
    sag, slope = sag_profile(*s.coeff_values(), r2v)
    tape.backward(sag)
    assert tape.grad(r2v) == pytest.approx(slope.val, rel=1e-12)


def test_surface_invariants():
    with pytest.raises(ValueError):
        _surface(sd=0.0)
    with pytest.raises(ValueError):
        # (1+k) c^2 r^2 >= 1 over the aperture
        AsphericSurface(0.9, 0.0, 2.0, AIR)


def test_sensor_geometry():
    s = Sensor(z=5.0)
    assert s.pixel_pitch == pytest.approx(0.0018158, abs=1e-6)
    assert s.resolution == (1080, 1920)
    with pytest.raises(ValueError):
        Sensor(z=5.0, diagonal=4.0, pixel_pitch=0.0018)  # off by 0.9%


def _doublet():
    pmma = MATERIALS["pmma"]
    surfaces = [
        AsphericSurface(0.05, 0.5, 1.0, pmma),
        AsphericSurface(-0.02, 1.1, 1.0, AIR),
        AsphericSurface(0.03, 1.6, 1.2, pmma),
        AsphericSurface(-0.04, 2.2, 1.2, AIR),
    ]
    return LensSystem(surfaces, ApertureStop(0.2, 0.52), Sensor(z=4.0), stop_index=0)


def test_lens_system_sequence_and_params():
    lens = _doublet()
    seq = lens.element_sequence()
    assert [k for k, _ in seq] == ["stop", "surface", "surface", "surface", "surface"]
    assert len(lens.parameters()) == 4 * 7
    assert lens.medium_before(0) is AIR
    assert lens.medium_before(1).name == "pmma"
    names = [p.name for p in lens.parameters()]
    assert "s0.c" in names and "s3.z" in names


def test_lens_system_ordering_violations():
    pmma = MATERIALS["pmma"]
    with pytest.raises(ValueError, match="axial gap"):
        LensSystem(
            [AsphericSurface(0.0, 1.0, 1.0, pmma), AsphericSurface(0.0, 1.02, 1.0, AIR)],
            ApertureStop(0.2, 0.5), Sensor(z=4.0), stop_index=0)
    with pytest.raises(ValueError, match="sensor"):
        LensSystem(
            [AsphericSurface(0.0, 1.0, 1.0, pmma), AsphericSurface(0.0, 1.6, 1.0, AIR)],
            ApertureStop(0.2, 0.5), Sensor(z=1.62), stop_index=0)


def test_copy_is_deep_for_parameters():
    lens = _doublet()
    twin = lens.copy()
    twin.surfaces[0].c.value = 0.123
    assert lens.surfaces[0].c.value == 0.05
    assert np.allclose(twin.param_values()[7:], lens.param_values()[7:])
