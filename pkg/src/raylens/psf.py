"""Differentiable point-spread functions by inverse bilinear splatting.

Every valid ray's sensor hit spreads its (unit) energy over the four
neighboring pixel centers of a ks x ks grid with the hat weight

    PSF(p) = sum_i u_i * sigma(|(p - o_i).ex| / L) * sigma(|(p - o_i).ey| / L)

where sigma(x) = 1-x on [0, 1] and 0 outside. A brute-force per-pixel
double loop over that formula is the test oracle for the scatter
implementation here.

Grids are anchored at the detached chief-ray hit of their field (green
wavelength), so distortion shows up as a rigid offset instead of kernel
overflow, and are normalized by the number of valid traced rays: energy
clipped by apertures or landing outside the grid is genuinely lost, which
keeps vignetting and halo bookkeeping honest.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import raytrace as rt
from .errors import DegeneratePsfError, DegenerateTraceError
from .optics import WL_BLUE, WL_GREEN, WL_RED

DEFAULT_KERNEL = 51
DEFAULT_PITCH = 0.0018

sigma = ad.sigma


class PsfGrid:
    """ks x ks energy grid; ``values`` always mirrors the cell variables."""

    def __init__(self, ks, pitch, center, wavelength, values=None,
                 cell_vars=None, valid_count=0, normalized=False):
        if ks % 2 != 1:
            raise ValueError("kernel size must be odd")
        if pitch <= 0:
            raise ValueError("pixel pitch must be positive")
        self.ks = int(ks)
        self.pitch = float(pitch)
        self.center = (float(center[0]), float(center[1]))
        self.wavelength = float(wavelength)
        self.values = np.zeros((ks, ks)) if values is None else values
        self.cell_vars = {} if cell_vars is None else cell_vars
        self.valid_count = int(valid_count)
        self.normalized = normalized

    def total(self):
        return float(self.values.sum())

    def cell_var(self, i, j):
        """Tape Variable for cell (i, j), or its float value if constant."""
        return self.cell_vars.get((i, j), float(self.values[i, j]))

    def crop(self, size):
        """Center crop to ``size`` (odd); tail energy outside is dropped."""
        if size % 2 != 1 or size > self.ks:
            raise ValueError("crop size must be odd and <= kernel size")
        lo = (self.ks - size) // 2
        hi = lo + size
        vals = self.values[lo:hi, lo:hi].copy()
        cvars = {(i - lo, j - lo): v for (i, j), v in self.cell_vars.items()
                 if lo <= i < hi and lo <= j < hi}
        out = PsfGrid(size, self.pitch, self.center, self.wavelength,
                      values=vals, cell_vars=cvars,
                      valid_count=self.valid_count, normalized=self.normalized)
        return out


def splat_psf(hits, ks=DEFAULT_KERNEL, pitch=DEFAULT_PITCH, center=(0.0, 0.0),
              wavelength=WL_GREEN):
    """Scatter valid ray hits onto a grid with bilinear hat weights.

    ``hits`` is a sequence of ((x, y), valid) with coordinates as floats or
    tape Variables. Pixel (i, j) sits at
    (cx + (j - m) L, cy + (m - i) L) with m = (ks-1)/2: row 0 is +y.
    """
    m = (ks - 1) // 2
    cx, cy = center
    contrib = {}
    n_valid = 0
    for (x, y), valid in hits:
        if not valid:
            continue
        n_valid += 1
        xv = x.val if isinstance(x, ad.Variable) else float(x)
        yv = y.val if isinstance(y, ad.Variable) else float(y)
        fj = (xv - cx) / pitch + m
        fi = m - (yv - cy) / pitch
        j0 = math.floor(fj)
        i0 = math.floor(fi)
        cols = []
        for j in (j0, j0 + 1):
            if -1 < j - fj < 1 and 0 <= j < ks:
                xp = cx + (j - m) * pitch
                cols.append((j, ad.sigma(ad.vabs(x - xp) / pitch)))
        rows = []
        for i in (i0, i0 + 1):
            if -1 < i - fi < 1 and 0 <= i < ks:
                yp = cy + (m - i) * pitch
                rows.append((i, ad.sigma(ad.vabs(y - yp) / pitch)))
        for i, wy in rows:
            for j, wx in cols:
                contrib.setdefault((i, j), []).append(wx * wy)

    values = np.zeros((ks, ks))
    cell_vars = {}
    for (i, j), parts in contrib.items():
        cell = ad.sum_vars(parts)
        cell = ad.unwrap(cell)
        if isinstance(cell, ad.Variable):
            cell_vars[(i, j)] = cell
            values[i, j] = cell.val
        else:
            values[i, j] = cell
    return PsfGrid(ks, pitch, center, wavelength, values=values,
                   cell_vars=cell_vars, valid_count=n_valid)


def splat_values(hits_xy, valid, ks=DEFAULT_KERNEL, pitch=DEFAULT_PITCH,
                 center=(0.0, 0.0), wavelength=WL_GREEN):
    """Value-only splat for evaluation paths (no tape, vectorized)."""
    m = (ks - 1) // 2
    cx, cy = center
    x = hits_xy[valid, 0]
    y = hits_xy[valid, 1]
    values = np.zeros((ks, ks))
    if x.size:
        fj = (x - cx) / pitch + m
        fi = m - (y - cy) / pitch
        j0 = np.floor(fj).astype(np.int64)
        i0 = np.floor(fi).astype(np.int64)
        for di in (0, 1):
            for dj in (0, 1):
                i = i0 + di
                j = j0 + dj
                xp = cx + (j - m) * pitch
                yp = cy + (m - i) * pitch
                ax = np.abs(x - xp) / pitch
                ay = np.abs(y - yp) / pitch
                w = np.where((ax < 1.0) & (ay < 1.0), (1.0 - ax) * (1.0 - ay), 0.0)
                ok = (i >= 0) & (i < ks) & (j >= 0) & (j < ks)
                np.add.at(values, (i[ok], j[ok]), w[ok])
    return PsfGrid(ks, pitch, center, wavelength, values=values,
                   valid_count=int(valid.sum()))


def normalize_psf(grid, mode="energy"):
    """Normalize cells by valid-ray count (energy mode) or in-grid sum.

    Energy mode keeps vignetting visible: rays clipped or landing outside
    the kernel window reduce the grid total below 1. Sum mode rescales to
    a unit-sum kernel for display.
    """
    if grid.valid_count == 0:
        raise DegeneratePsfError("no valid rays reached the grid window")
    if mode == "energy":
        denom = float(grid.valid_count)
    elif mode == "sum":
        denom = grid.total()
        if denom <= 0.0:
            raise DegeneratePsfError("grid sum is zero; cannot sum-normalize")
    else:
        raise ValueError("mode must be 'energy' or 'sum'")
    values = grid.values / denom
    cell_vars = {}
    for key, v in grid.cell_vars.items():
        nv = v / denom
        cell_vars[key] = nv
        values[key] = nv.val
    return PsfGrid(grid.ks, grid.pitch, grid.center, grid.wavelength,
                   values=values, cell_vars=cell_vars,
                   valid_count=grid.valid_count, normalized=True)


def psf_rgb(system, field_angle, count, seed, tape=None, bound=None,
            ks=DEFAULT_KERNEL, pitch=None, anchor=None, valid_override=None,
            bundles=None, collect=None):
    """Normalized R/G/B grids (656.3, 589.3, 486.1 nm) sharing one anchor.

    The anchor is the green chief-ray hit, detached, so all three channels
    live on the same pixel window and chromatic offsets stay visible.
    Pass ``tape``/``bound`` for differentiable grids. ``anchor``,
    ``valid_override`` (one mask per channel), and ``bundles`` (one per
    channel) pin the grid window, the validity pattern, and the launch rays
    for finite-difference probes.
    """
    if pitch is None:
        pitch = system.sensor.pixel_pitch
    if anchor is None:
        anchor = rt.chief_ray(system, field_angle, WL_GREEN)
    grids = []
    for ci, wl in enumerate((WL_RED, WL_GREEN, WL_BLUE)):
        mask = None if valid_override is None else valid_override[ci]
        if bundles is not None:
            bundle = bundles[ci]
        else:
            bundle = rt.sample_pupil_rays(system, field_angle, wl, count, seed)
        if tape is None and bound is None:
            res = rt.trace_to_sensor(system, bundle, valid_override=mask)
            raw = splat_values(res.hits_xy(), res.valid, ks=ks, pitch=pitch,
                               center=anchor, wavelength=wl)
        else:
            res = rt.trace_to_sensor(system, bundle, tape=tape, bound=bound,
                                     valid_override=mask)
            hits = [(res.hit_vars(i), res.valid[i]) for i in range(len(res))]
            raw = splat_psf(hits, ks=ks, pitch=pitch, center=anchor,
                            wavelength=wl)
        if collect is not None:
            collect.append(res)
        grids.append(normalize_psf(raw, mode="energy"))
    return tuple(grids)


@dataclass
class SpotStats:
    """Spot-diagram statistics; ``rms_var`` carries the differentiable RMS."""

    centroid: tuple
    rms_radius: float
    median_radius: float
    r80: float
    rms_var: object = None


def _rms_nodes(xs, ys):
    """Differentiable RMS about the centroid.

    The compiled engine's spot_rms kernel replicates this node order; keep
    them in lockstep.
    """
    n = len(xs)
    sx = ad.sum_vars(xs)
    sy = ad.sum_vars(ys)
    cx = sx / float(n)
    cy = sy / float(n)
    d2s = []
    for x, y in zip(xs, ys):
        dx = x - cx
        dy = y - cy
        d2s.append(dx * dx + dy * dy)
    s2 = ad.sum_vars(d2s)
    ms = s2 / float(n)
    return ad.sqrt(ms)


def spot_stats(hits):
    """Centroid, RMS, median, and 80%-enclosed radii of valid hits."""
    pts = [(p, v) for p, v in hits if v]
    if len(pts) < 2:
        raise DegenerateTraceError("spot statistics need at least 2 valid hits")
    xs = [p[0] for p, _ in pts]
    ys = [p[1] for p, _ in pts]
    rms = _rms_nodes(xs, ys)
    xv = np.array([x.val if isinstance(x, ad.Variable) else float(x) for x in xs])
    yv = np.array([y.val if isinstance(y, ad.Variable) else float(y) for y in ys])
    cx, cy = xv.mean(), yv.mean()
    r = np.hypot(xv - cx, yv - cy)
    rs = np.sort(r)
    n = len(rs)
    r80 = rs[min(n - 1, max(0, math.ceil(0.8 * n) - 1))]
    rms_val = rms.val if isinstance(rms, ad.Variable) else float(rms)
    on_tape = isinstance(rms, ad.Variable) and rms.tape is not None
    return SpotStats(centroid=(float(cx), float(cy)),
                     rms_radius=rms_val,
                     median_radius=float(np.median(rs)),
                     r80=float(r80),
                     rms_var=rms if on_tape else None)


def rms_spot(res):
    """Differentiable RMS spot radius of a TraceResult's valid hits.

    Uses the fused reduction kernel when the compiled engine is active.
    """
    v = np.nonzero(res.valid)[0]
    if len(v) < 2:
        raise DegenerateTraceError(
            "RMS spot needs at least 2 valid rays (field %g deg, %g um)"
            % (res.field_angle, res.wavelength))
    tape = res.tape
    if tape is not None and getattr(tape.engine, "has_fused", False):
        idx, val = tape.engine.spot_rms(
            np.ascontiguousarray(res.x_idx[v]), np.ascontiguousarray(res.x_val[v]),
            np.ascontiguousarray(res.y_idx[v]), np.ascontiguousarray(res.y_val[v]))
        if idx < 0:
            return ad.Variable(val)
        return ad.Variable(val, tape, int(idx), tape.generation)
    xs = []
    ys = []
    for i in v:
        x, y = res.hit_vars(i)
        xs.append(x)
        ys.append(y)
    return ad.unwrap(_rms_nodes(xs, ys))
