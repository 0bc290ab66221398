import math

import numpy as np
import pytest

from raylens import autodiff as ad
from raylens import psf as psf_mod
from raylens import raytrace as rt
from raylens.errors import DegeneratePsfError, DegenerateTraceError
from raylens.psf import (
    PsfGrid,
    normalize_psf,
    psf_rgb,
    rms_spot,
    sigma,
    splat_psf,
    splat_values,
    spot_stats,
)
from tests.test_raytrace import doublet, empty_system


def brute_force_psf(hits_xy, valid, ks, pitch, center):
    """Literal per-pixel double loop over the splatting formula (oracle)."""
    m = (ks - 1) // 2
    cx, cy = center
    out = np.zeros((ks, ks))
    for i in range(ks):
        for j in range(ks):
            xp = cx + (j - m) * pitch
            yp = cy + (m - i) * pitch
            acc = 0.0
            for (x, y), v in zip(hits_xy, valid):
                if not v:
                    continue
                sx = abs(x - xp) / pitch
                sy = abs(y - yp) / pitch
                wx = 1.0 - sx if 0.0 <= sx <= 1.0 else 0.0
                wy = 1.0 - sy if 0.0 <= sy <= 1.0 else 0.0
                acc += wx * wy
            out[i, j] = acc
    return out


def test_sigma_reexport():
    assert sigma(ad.Variable(0.0)).val == 1.0
    assert sigma(ad.Variable(0.3)).val == pytest.approx(0.7)
    assert sigma(ad.Variable(1.2)).val == 0.0


def test_single_ray_on_pixel_center():
    g = splat_psf([(((0.0), (0.0)), True)], ks=5, pitch=0.1, center=(0.0, 0.0))
    assert g.values[2, 2] == 1.0
    assert g.total() == 1.0


def test_single_ray_on_corner_of_four_pixels():
    g = splat_psf([((0.05, 0.05), True)], ks=5, pitch=0.1, center=(0.0, 0.0))
    got = {k: v for k, v in np.ndenumerate(g.values) if v != 0}
    assert got == {(1, 2): pytest.approx(0.25), (1, 3): pytest.approx(0.25),
                   (2, 2): pytest.approx(0.25), (2, 3): pytest.approx(0.25)}


def test_single_ray_bilinear_weights():
    # offset (0.2, 0.3) pixels from a center: weights (0.8, 0.2) x (0.7, 0.3)
    g = splat_psf([((0.02, 0.03), True)], ks=5, pitch=0.1, center=(0.0, 0.0))
    assert g.values[2, 2] == pytest.approx(0.8 * 0.7)
    assert g.values[2, 3] == pytest.approx(0.2 * 0.7)
    assert g.values[1, 2] == pytest.approx(0.8 * 0.3)
    assert g.values[1, 3] == pytest.approx(0.2 * 0.3)
    assert g.total() == pytest.approx(1.0, abs=1e-12)


def test_splat_matches_brute_force_oracle():
    rng = np.random.default_rng(77)
    for trial in range(100):
        ks = int(rng.choice([3, 5, 9]))
        pitch = float(rng.uniform(0.001, 0.1))
        center = tuple(rng.uniform(-0.5, 0.5, 2))
        n = int(rng.integers(1, 40))
        span = ks * pitch
        hits = rng.uniform(-0.8 * span, 0.8 * span, (n, 2)) + np.array(center)
        valid = rng.random(n) > 0.2
        pairs = [((hits[i, 0], hits[i, 1]), bool(valid[i])) for i in range(n)]
        g = splat_psf(pairs, ks=ks, pitch=pitch, center=center)
        oracle = brute_force_psf(hits, valid, ks, pitch, center)
        assert np.max(np.abs(g.values - oracle)) <= 1e-12
        gv = splat_values(hits, valid, ks=ks, pitch=pitch, center=center)
        assert np.max(np.abs(gv.values - oracle)) <= 1e-12


def test_weight_conservation_in_grid():
    rng = np.random.default_rng(3)
    ks, pitch = 9, 0.05
    # keep hits strictly inside the grid so all 4 neighbors exist
    inner = (ks // 2 - 1) * pitch
    for _ in range(50):
        hit = tuple(rng.uniform(-inner, inner, 2))
        g = splat_psf([(hit, True)], ks=ks, pitch=pitch)
        assert g.total() == pytest.approx(1.0, abs=1e-12)


def test_translation_equivariance():
    rng = np.random.default_rng(5)
    hits = rng.uniform(-0.1, 0.1, (30, 2))
    shift = np.array([1.234, -0.567])
    g0 = splat_psf([(tuple(h), True) for h in hits], ks=7, pitch=0.03,
                   center=(0.0, 0.0))
    g1 = splat_psf([(tuple(h + shift), True) for h in hits], ks=7, pitch=0.03,
                   center=tuple(shift))
    assert np.max(np.abs(g0.values - g1.values)) <= 1e-12


def test_cell_gradient_matches_finite_difference():
    pitch = 0.1

    def weight_of_cell(vx):
        g = splat_psf([((vx[0].val if hasattr(vx[0], "val") else vx[0],
                         0.013), True)], ks=5, pitch=pitch)
        return g

    # differentiable: build on a tape and check one cell's adjoint vs FD
    tape = ad.Tape()
    x = tape.leaf(0.027)
    y = tape.leaf(0.013)
    g = splat_psf([((x, y), True)], ks=5, pitch=pitch)
    cell = g.cell_vars[(2, 2)]
    tape.backward(cell)
    gx = tape.grad(x)
    gy = tape.grad(y)

    h = 1e-7
    for axis, gad in ((0, gx), (1, gy)):
        vals = []
        for sign in (1.0, -1.0):
            p = [0.027, 0.013]
            p[axis] += sign * h
            gg = splat_psf([((p[0], p[1]), True)], ks=5, pitch=pitch)
            vals.append(gg.values[2, 2])
        fd = (vals[0] - vals[1]) / (2 * h)
        assert gad == pytest.approx(fd, rel=1e-6)


def test_normalize_energy_accounting():
    # 8 valid rays all inside the grid -> total exactly 1
    rng = np.random.default_rng(11)
    hits = [((float(u), float(v)), True)
            for u, v in rng.uniform(-0.04, 0.04, (8, 2))]
    g = normalize_psf(splat_psf(hits, ks=9, pitch=0.05))
    assert g.total() == pytest.approx(1.0, abs=1e-9)

    # 4 of 16 land far outside the window -> total exactly 0.75
    hits = [((float(u), float(v)), True)
            for u, v in rng.uniform(-0.04, 0.04, (12, 2))]
    hits += [((5.0, 5.0), True)] * 4
    g = normalize_psf(splat_psf(hits, ks=9, pitch=0.05))
    assert g.total() == pytest.approx(0.75, abs=1e-9)

    # zero valid rays -> error
    with pytest.raises(DegeneratePsfError):
        normalize_psf(splat_psf([((0.0, 0.0), False)], ks=9, pitch=0.05))


def test_normalize_sum_mode():
    hits = [((0.0, 0.0), True), ((5.0, 5.0), True)]
    g = normalize_psf(splat_psf(hits, ks=5, pitch=0.1), mode="sum")
    assert g.total() == pytest.approx(1.0, abs=1e-12)


def test_psf_rgb_empty_system_is_delta():
    sys_ = empty_system(sensor_z=10.0)
    grids = psf_rgb(sys_, 0.0, count=64, seed=0, ks=11)
    for g in grids:
        assert g.total() == pytest.approx(1.0, abs=1e-9)
        assert g.values[5, 5] == pytest.approx(1.0, abs=1e-9)


def test_psf_rgb_shares_anchor_and_bounds():
    lens = doublet(seed=2)
    grids = psf_rgb(lens, 10.0, count=128, seed=1)
    anchors = {g.center for g in grids}
    assert len(anchors) == 1
    for g in grids:
        assert g.total() <= 1.0 + 1e-9
        assert np.all(g.values >= 0.0)


def test_psf_rgb_chromatic_channels_differ():
    # wide window so the weakly-focusing doublet lands rays in-grid
    lens = doublet(seed=2)
    r, g, b = psf_rgb(lens, 0.0, count=256, seed=1, ks=51, pitch=0.02)
    assert r.total() > 0.1 and b.total() > 0.1
    assert np.abs(r.values - b.values).sum() > 1e-6
    assert np.abs(r.values - g.values).sum() > 1e-6


def test_psf_rgb_differentiable_matches_value_mode():
    lens = doublet(seed=2)
    gv = psf_rgb(lens, 5.0, count=64, seed=3)
    tape = ad.Tape()
    bound = rt.bind_system(lens, tape)
    gd = psf_rgb(lens, 5.0, count=64, seed=3, tape=tape, bound=bound)
    for a, b in zip(gv, gd):
        assert np.allclose(a.values, b.values, atol=1e-12)
        assert a.valid_count == b.valid_count


def test_spot_stats_cross_pattern():
    hits = [((0.0, 0.0), True), ((1.0, 0.0), True), ((-1.0, 0.0), True),
            ((0.0, 1.0), True), ((0.0, -1.0), True)]
    st = spot_stats(hits)
    assert st.centroid == (0.0, 0.0)
    assert st.rms_radius == pytest.approx(math.sqrt(0.8), rel=1e-12)
    assert st.median_radius == 1.0
    assert st.r80 == 1.0


def test_spot_stats_identical_hits():
    st = spot_stats([((0.3, -0.2), True)] * 5)
    assert st.rms_radius == 0.0
    assert st.median_radius == 0.0
    assert st.r80 == 0.0


def test_spot_stats_long_tail_ratio():
    hits = [((0.001 * math.cos(i), 0.001 * math.sin(i)), True) for i in range(99)]
    hits.append(((1.0, 0.0), True))
    st = spot_stats(hits)
    # core radii ~0.01 (centroid offset), rms ~0.1: strongly long-tailed
    assert st.median_radius / st.rms_radius < 0.15


def test_spot_stats_needs_two_hits():
    with pytest.raises(DegenerateTraceError):
        spot_stats([((0.0, 0.0), True), ((1.0, 1.0), False)])


def test_rms_spot_fused_matches_python():
    lens = doublet(seed=4)
    b = rt.sample_pupil_rays(lens, 8.0, 0.5893, 64, seed=2)

    outs = []
    for force in (True, False):
        tape = ad.Tape()
        bound = rt.bind_system(lens, tape)
        res = rt.trace_to_sensor(None, b, bound=bound, force_scalar=force)
        r = rms_spot(res)
        tape.backward(r)
        grads = [tape.grad(v) for _, v in sorted(bound.var_of.items(),
                                                 key=lambda kv: kv[0].name)]
        outs.append((r.val, grads))
    assert outs[0][0] == outs[1][0]
    assert outs[0][1] == outs[1][1]


def test_rms_spot_degenerate():
    lens = doublet(seed=4)
    b = rt.sample_pupil_rays(lens, 8.0, 0.5893, 4, seed=2)
    res = rt.trace_to_sensor(lens, b)
    res.valid[:] = False
    with pytest.raises(DegenerateTraceError, match="field"):
        rms_spot(res)


def test_grid_crop():
    g = PsfGrid(5, 0.1, (0.0, 0.0), 0.5893)
    g.values[2, 2] = 0.5
    g.values[0, 0] = 0.25
    c = g.crop(3)
    assert c.values[1, 1] == 0.5
    assert c.total() == 0.5
    with pytest.raises(ValueError):
        g.crop(4)
