"""Sequential differentiable ray tracing.

Three implementations of the same per-surface interaction live side by
side and are pinned together by parity tests:

* a scalar path built from ``autodiff`` Variables (this module) — the
  canonical operation order;
* a vectorized numpy value-only tracer used for evaluation, chief-ray
  solves, and focus searches;
* a fused kernel in the compiled tape engine that records the identical
  node sequence at C speed (used automatically when available).

Ray-surface intersection runs a value-only Newton iteration to
convergence, then records one final Newton update on the tape so the
intersection differentiates through the implicit function theorem.
Validity is a non-differentiable gate: clipped or failed rays contribute
nothing downstream.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ChiefRayError
from .optics import sag_expr, slope_expr

NEWTON_TOL = 1e-9
NEWTON_MAX_ITER = 32
CHIEF_TOL = 1e-6
CHIEF_MAX_ITER = 64
LAUNCH_GAP = 1.0


@dataclass
class Ray:
    """A single ray; components may be floats or tape Variables."""

    origin: tuple
    direction: tuple
    wavelength: float = 0.5893
    valid: bool = True
    energy: float = 1.0


class RayBundle:
    """Rays sharing one field angle and wavelength, as packed arrays."""

    def __init__(self, origins, directions, wavelength, field_angle, seed):
        self.origins = np.ascontiguousarray(origins, dtype=np.float64)
        self.directions = np.ascontiguousarray(directions, dtype=np.float64)
        self.wavelength = float(wavelength)
        self.field_angle = float(field_angle)
        self.seed = seed

    def __len__(self):
        return self.origins.shape[0]

    def ray(self, i):
        return Ray(tuple(self.origins[i]), tuple(self.directions[i]), self.wavelength)


def _launch_geometry(system, field_angle_deg):
    """Launch plane z, fill radius, and disk center for a field angle."""
    seq = system.element_sequence()
    first_z = seq[0][1].vertex_z if seq[0][0] == "stop" else seq[0][1].vertex_z.value
    launch_z = first_z - LAUNCH_GAP
    theta = math.radians(field_angle_deg)
    if system.surfaces:
        target_z = system.surfaces[0].vertex_z.value
        radius = system.surfaces[0].semi_diameter
    else:
        target_z = system.stop.vertex_z
        radius = 0.0
    center_y = -math.tan(theta) * (target_z - launch_z)
    return launch_z, radius, center_y, theta


def _concentric_disk(u, v):
    """Shirley's square-to-disk map; keeps stratification uniform."""
    a = 2.0 * u - 1.0
    b = 2.0 * v - 1.0
    r = np.zeros_like(a)
    phi = np.zeros_like(a)
    use_a = np.abs(a) > np.abs(b)
    safe_a = np.where(a == 0.0, 1.0, a)
    safe_b = np.where(b == 0.0, 1.0, b)
    r = np.where(use_a, a, b)
    phi = np.where(use_a, (math.pi / 4.0) * (b / safe_a),
                   math.pi / 2.0 - (math.pi / 4.0) * (a / safe_b))
    both_zero = (a == 0.0) & (b == 0.0)
    r = np.where(both_zero, 0.0, r)
    phi = np.where(both_zero, 0.0, phi)
    return r * np.cos(phi), r * np.sin(phi)


def sample_pupil_rays(system, field_angle, wavelength, count, seed):
    """Stratified-jittered disk bundle aimed to fill the first surface.

    Deterministic in (field_angle, wavelength, count, seed): the jitter
    stream mixes the field angle's bit pattern with the seed, so repeated
    calls are bit-identical and distinct fields decorrelate.
    """
    if not (0.0 <= field_angle < 90.0):
        raise ValueError("field_angle must be in [0, 90) degrees")
    if count < 1:
        raise ValueError("count must be >= 1")
    launch_z, radius, center_y, theta = _launch_geometry(system, field_angle)

    angle_bits = int(np.float64(field_angle).view(np.uint64))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), count, angle_bits]))
    g = math.isqrt(count)
    if g * g < count:
        g += 1
    jit = rng.random((g * g, 2))
    cells = np.arange(g * g)[:count]
    u = (cells // g + jit[:count, 0]) / g
    v = (cells % g + jit[:count, 1]) / g
    px, py = _concentric_disk(u, v)

    origins = np.empty((count, 3))
    origins[:, 0] = radius * px
    origins[:, 1] = center_y + radius * py
    origins[:, 2] = launch_z
    directions = np.empty((count, 3))
    directions[:, 0] = 0.0
    directions[:, 1] = math.sin(theta)
    directions[:, 2] = math.cos(theta)
    return RayBundle(origins, directions, wavelength, field_angle, seed)


# ---------------------------------------------------------------------------
# parameter binding


class BoundSurface:
    """Surface coefficients as tape Variables (frozen ones stay floats)."""

    __slots__ = ("c", "k", "a4", "a6", "a8", "a10", "vz",
                 "vals", "semi_diameter", "material_after")

    def __init__(self, surface, tape):
        def bind(p):
            return p.value if (p.frozen or tape is None) else tape.leaf(p.value)

        self.c = bind(surface.c)
        self.k = bind(surface.k)
        self.a4 = bind(surface.a4)
        self.a6 = bind(surface.a6)
        self.a8 = bind(surface.a8)
        self.a10 = bind(surface.a10)
        self.vz = bind(surface.vertex_z)
        # float mirror for the value-only Newton iteration
        self.vals = (surface.c.value, surface.k.value, surface.a4.value,
                     surface.a6.value, surface.a8.value, surface.a10.value,
                     surface.vertex_z.value)
        self.semi_diameter = surface.semi_diameter
        self.material_after = surface.material_after


class BoundSystem:
    """A lens system with its optimizable parameters on a tape."""

    def __init__(self, system, tape):
        self.system = system
        self.tape = tape
        self.surfaces = [BoundSurface(s, tape) for s in system.surfaces]
        self.var_of = {}
        for surf, bs in zip(system.surfaces, self.surfaces):
            for p, v in ((surf.c, bs.c), (surf.k, bs.k), (surf.a4, bs.a4),
                         (surf.a6, bs.a6), (surf.a8, bs.a8), (surf.a10, bs.a10),
                         (surf.vertex_z, bs.vz)):
                if isinstance(v, ad.Variable):
                    self.var_of[p] = v

    def gradients(self):
        """Parameter -> adjoint map after the tape's backward pass."""
        return {p: self.tape.grad(v) for p, v in self.var_of.items()}


def bind_system(system, tape):
    return BoundSystem(system, tape)


# ---------------------------------------------------------------------------
# value-only Newton (floats; mirrored by the numpy tracer and the kernel)


def _sag_slope_val(c, k, a4, a6, a8, a10, r2):
    cc = c * c
    w = (1.0 + k) * cc
    u = w * r2
    if u >= 1.0:
        return None
    s = math.sqrt(1.0 - u)
    den = 1.0 + s
    num = c * r2
    base = num / den
    r4 = r2 * r2
    r6 = r4 * r2
    r8 = r6 * r2
    r10 = r8 * r2
    sag = base + a4 * r4 + a6 * r6 + a8 * r8 + a10 * r10
    slope = (c / den
             + num * w / ((2.0 * s) * (den * den))
             + (2.0 * a4) * r2
             + (3.0 * a6) * r4
             + (4.0 * a8) * r6
             + (5.0 * a10) * r8)
    return sag, slope


def _newton_values(vals, ox, oy, oz, dx, dy, dz):
    """Converge the ray-surface distance; returns (t, fp, ok)."""
    c, k, a4, a6, a8, a10, vz = vals
    if dz <= 0.0:
        return 0.0, 1.0, False
    t = (vz - oz) / dz
    converged = False
    x = y = r2 = 0.0
    for _ in range(NEWTON_MAX_ITER):
        x = ox + dx * t
        y = oy + dy * t
        z = oz + dz * t
        r2 = x * x + y * y
        ss = _sag_slope_val(c, k, a4, a6, a8, a10, r2)
        if ss is None:
            return t, 1.0, False
        sag, slope = ss
        f = z - vz - sag
        if abs(f) < NEWTON_TOL:
            converged = True
            break
        fp = dz - slope * (2.0 * (x * dx + y * dy))
        if fp == 0.0:
            return t, 1.0, False
        t = t - f / fp
    if not converged or t < 0.0:
        return t, 1.0, False
    ss = _sag_slope_val(c, k, a4, a6, a8, a10, r2)
    if ss is None:
        return t, 1.0, False
    slope = ss[1]
    fp = dz - slope * (2.0 * (x * dx + y * dy))
    if fp == 0.0:
        return t, 1.0, False
    return t, fp, True


# ---------------------------------------------------------------------------
# scalar differentiable path (canonical node order for the fused kernel)


def _val(x):
    return x.val if isinstance(x, ad.Variable) else x


def intersect(ray, surface, bound=None):
    """Move a ray's origin onto a surface; failures mark it invalid."""
    if not ray.valid:
        return ray
    bs = bound if bound is not None else BoundSurface(surface, None)
    ox, oy, oz = ray.origin
    dx, dy, dz = ray.direction
    tb, fp, ok = _newton_values(bs.vals, _val(ox), _val(oy), _val(oz),
                                _val(dx), _val(dy), _val(dz))
    if not ok:
        return Ray(ray.origin, ray.direction, ray.wavelength, valid=False)
    x, y, z, r2b, _ = _intersect_nodes(bs, (ox, oy, oz), (dx, dy, dz), tb, fp)
    if math.sqrt(_val(r2b)) > bs.semi_diameter:
        return Ray(ray.origin, ray.direction, ray.wavelength, valid=False)
    return Ray((ad.unwrap(x), ad.unwrap(y), ad.unwrap(z)), ray.direction,
               ray.wavelength, valid=True)


def _intersect_nodes(bs, o, d, tb, fp):
    """One on-tape Newton update at the converged distance ``tb``.

    ``tb`` and ``fp`` are detached, so the recorded update is the implicit
    function theorem in one step: d(t)/d(param) = -d(f)/d(param) / fp. The
    surface slope for the normal is then evaluated at the differentiable
    intersection point, which carries the point-motion term of the normal.
    The compiled kernel in _tapecore.pyx replicates this node sequence
    exactly; keep the operation order stable.
    """
    ox, oy, oz = o
    dx, dy, dz = d
    x1 = ox + dx * tb
    y1 = oy + dy * tb
    r2b = x1 * x1 + y1 * y1
    sagv = sag_expr(bs.c, bs.k, bs.a4, bs.a6, bs.a8, bs.a10, r2b)
    zb = oz + dz * tb
    fb = zb - bs.vz - sagv
    t = tb - fb / fp
    x = ox + dx * t
    y = oy + dy * t
    z = oz + dz * t
    r2 = x * x + y * y
    slopev = slope_expr(bs.c, bs.k, bs.a4, bs.a6, bs.a8, bs.a10, r2)
    return x, y, z, r2b, slopev


def _normal_nodes(x, y, slopev):
    gx = x * slopev
    gy = y * slopev
    nx = gx * -2.0
    ny = gy * -2.0
    n2 = nx * nx + ny * ny + 1.0
    nn = ad.sqrt(n2)
    return nx / nn, ny / nn, 1.0 / nn


def _refract_nodes(d, n, eta):
    """Vector refraction with the normal oriented along the ray (d.n > 0)."""
    dx, dy, dz = d
    nx, ny, nz = n
    cosi = dx * nx + dy * ny + dz * nz
    cosi2 = cosi * cosi
    omc = 1.0 - cosi2
    sin2t = (eta * eta) * omc
    kk = 1.0 - sin2t
    if _val(kk) < 0.0:
        return None, cosi  # total internal reflection
    cost = ad.sqrt(kk)
    ec = cosi * eta
    coef = ec - cost
    d2x = dx * eta - coef * nx
    d2y = dy * eta - coef * ny
    d2z = dz * eta - coef * nz
    return (d2x, d2y, d2z), cosi


def refract(ray, normal, n1, n2):
    """Snell refraction of a ray at a surface with unit ``normal``.

    The normal may point to either side; it is flipped to lie along the
    ray before applying the transmission formula. Total internal
    reflection invalidates the ray instead of raising.
    """
    if not ray.valid:
        return ray
    d = ray.direction
    nx, ny, nz = normal
    dot = _val(d[0]) * _val(nx) + _val(d[1]) * _val(ny) + _val(d[2]) * _val(nz)
    if dot < 0.0:
        nx, ny, nz = -1.0 * nx, -1.0 * ny, -1.0 * nz
    eta = n1 / n2
    d2, _ = _refract_nodes(d, (nx, ny, nz), eta)
    if d2 is None:
        return Ray(ray.origin, ray.direction, ray.wavelength, valid=False)
    return Ray(ray.origin, tuple(ad.unwrap(c) for c in d2), ray.wavelength, valid=True)


class TraceResult:
    """Sensor hits, validity, and per-surface incidence cosines for a bundle.

    Hits and cosines are stored as (tape index, value) pairs so the fused
    kernel can hand them over without building Python objects; ``hit_vars``
    rewraps them lazily.
    """

    def __init__(self, tape, x_idx, y_idx, x_val, y_val, valid,
                 cos_idx, cos_val, stop_xy, wavelength, field_angle):
        self.tape = tape
        self.x_idx = x_idx
        self.y_idx = y_idx
        self.x_val = x_val
        self.y_val = y_val
        self.valid = valid
        self.cos_idx = cos_idx
        self.cos_val = cos_val
        self.stop_xy = stop_xy
        self.wavelength = wavelength
        self.field_angle = field_angle

    def __len__(self):
        return self.x_val.shape[0]

    @property
    def n_valid(self):
        return int(self.valid.sum())

    def _wrap(self, idx, val):
        if self.tape is None or idx < 0:
            return float(val)
        return ad.Variable(float(val), self.tape, int(idx), self.tape.generation)

    def hit_vars(self, i):
        return (self._wrap(self.x_idx[i], self.x_val[i]),
                self._wrap(self.y_idx[i], self.y_val[i]))

    def hits_xy(self):
        return np.column_stack([self.x_val, self.y_val])

    def incidence_cos(self, i):
        return [self._wrap(self.cos_idx[i, s], self.cos_val[i, s])
                for s in range(self.cos_idx.shape[1])]


def _medium_chain(system, wavelength):
    """(n_before, n_after, eta) per surface at one wavelength."""
    out = []
    for i, s in enumerate(system.surfaces):
        n1 = system.medium_before(i).index(wavelength)
        n2 = s.material_after.index(wavelength)
        out.append((n1, n2, n1 / n2))
    return out


def trace_to_sensor(system, bundle, tape=None, bound=None, valid_override=None,
                    force_scalar=False):
    """Trace a bundle through every element to the sensor plane.

    Without a tape this is a fast value-only trace. With ``tape`` (or a
    pre-bound ``bound`` system) sensor hits and incidence cosines are
    recorded as differentiable nodes. ``valid_override`` replaces the
    aperture and stop clipping decisions with a fixed mask (hard failures
    such as TIR still invalidate) so finite-difference probes can hold the
    validity pattern fixed.
    """
    if bound is None and tape is None:
        return _trace_values(system, bundle, valid_override)
    if bound is None:
        bound = BoundSystem(system, tape)
    engine = bound.tape.engine
    if getattr(engine, "has_fused", False) and not force_scalar:
        from . import _fused
        return _fused.trace_bundle(bound, bundle, valid_override)
    return _trace_scalar(bound, bundle, valid_override)


def _trace_scalar(bound, bundle, valid_override=None):
    system = bound.system
    n_rays = len(bundle)
    n_surf = len(system.surfaces)
    media = _medium_chain(system, bundle.wavelength)
    sensor_z = system.sensor.z
    stop = system.stop
    stop_index = system.stop_index
    free_clip = valid_override is None

    x_idx = np.full(n_rays, -1, dtype=np.int32)
    y_idx = np.full(n_rays, -1, dtype=np.int32)
    x_val = np.zeros(n_rays)
    y_val = np.zeros(n_rays)
    valid = np.zeros(n_rays, dtype=bool)
    cos_idx = np.full((n_rays, n_surf), -1, dtype=np.int32)
    cos_val = np.ones((n_rays, n_surf))
    stop_xy = np.zeros((n_rays, 2))

    for i in range(n_rays):
        ox, oy, oz = (float(v) for v in bundle.origins[i])
        dx, dy, dz = (float(v) for v in bundle.directions[i])
        o = (ox, oy, oz)
        d = (dx, dy, dz)
        ok = True
        for si in range(n_surf):
            if stop_index == si:
                ok = _stop_clip(o, d, stop, stop_xy, i, free_clip) and ok
                if not ok:
                    break
            bs = bound.surfaces[si]
            tb, fp, newton_ok = _newton_values(
                bs.vals, _val(o[0]), _val(o[1]), _val(o[2]),
                _val(d[0]), _val(d[1]), _val(d[2]))
            if not newton_ok:
                ok = False
                break
            x, y, z, r2b, slopev = _intersect_nodes(bs, o, d, tb, fp)
            if free_clip and math.sqrt(_val(r2b)) > bs.semi_diameter:
                ok = False
                break
            nrm = _normal_nodes(x, y, slopev)
            eta = media[si][2]
            d2, cosi = _refract_nodes(d, nrm, eta)
            if _val(cosi) <= 0.0:
                ok = False
                break
            cos_idx[i, si] = cosi.idx if isinstance(cosi, ad.Variable) else -1
            cos_val[i, si] = _val(cosi)
            if d2 is None:
                ok = False
                break
            o = (x, y, z)
            d = d2
        if ok and stop_index == n_surf:
            ok = _stop_clip(o, d, stop, stop_xy, i, free_clip)
        if not ok:
            continue
        dzv = _val(d[2])
        if dzv <= 0.0:
            continue
        num = sensor_z - o[2]
        ts = num / d[2]
        xh = o[0] + d[0] * ts
        yh = o[1] + d[1] * ts
        x_idx[i] = xh.idx if isinstance(xh, ad.Variable) else -1
        y_idx[i] = yh.idx if isinstance(yh, ad.Variable) else -1
        x_val[i] = _val(xh)
        y_val[i] = _val(yh)
        valid[i] = True

    if valid_override is not None:
        valid &= valid_override
    return TraceResult(bound.tape, x_idx, y_idx, x_val, y_val, valid,
                       cos_idx, cos_val, stop_xy, bundle.wavelength,
                       bundle.field_angle)


def _stop_clip(o, d, stop, stop_xy, i, apply_clip):
    ozv, dzv = _val(o[2]), _val(d[2])
    if dzv <= 0.0:
        return False
    ts = (stop.vertex_z - ozv) / dzv
    xs = _val(o[0]) + _val(d[0]) * ts
    ys = _val(o[1]) + _val(d[1]) * ts
    stop_xy[i, 0] = xs
    stop_xy[i, 1] = ys
    if apply_clip and xs * xs + ys * ys > stop.radius * stop.radius:
        return False
    return True


# ---------------------------------------------------------------------------
# vectorized value-only tracer


def _sag_np(c, k, a4, a6, a8, a10, r2):
    """Numpy mirror of optics.sag_expr (domain-guarded for dead rays)."""
    cc = c * c
    w = (1.0 + k) * cc
    u = w * r2
    s = np.sqrt(np.where(u < 1.0, 1.0 - u, 1.0))
    den = 1.0 + s
    num = c * r2
    base = num / den
    r4 = r2 * r2
    r6 = r4 * r2
    r8 = r6 * r2
    r10 = r8 * r2
    return base + a4 * r4 + a6 * r6 + a8 * r8 + a10 * r10


def _slope_np(c, k, a4, a6, a8, a10, r2):
    """Numpy mirror of optics.slope_expr (domain-guarded for dead rays)."""
    cc = c * c
    w = (1.0 + k) * cc
    u = w * r2
    s = np.sqrt(np.where(u < 1.0, 1.0 - u, 1.0))
    den = 1.0 + s
    num = c * r2
    r4 = r2 * r2
    r6 = r4 * r2
    r8 = r6 * r2
    return (c / den
            + num * w / ((2.0 * s) * (den * den))
            + (2.0 * a4) * r2
            + (3.0 * a6) * r4
            + (4.0 * a8) * r6
            + (5.0 * a10) * r8)


def _sag_slope_np(c, k, a4, a6, a8, a10, r2, ok):
    cc = c * c
    w = (1.0 + k) * cc
    u = w * r2
    dom = u < 1.0
    ok &= dom
    s = np.sqrt(np.where(dom, 1.0 - u, 1.0))
    den = 1.0 + s
    num = c * r2
    base = num / den
    r4 = r2 * r2
    r6 = r4 * r2
    r8 = r6 * r2
    r10 = r8 * r2
    sag = base + a4 * r4 + a6 * r6 + a8 * r8 + a10 * r10
    slope = (c / den
             + num * w / ((2.0 * s) * (den * den))
             + (2.0 * a4) * r2
             + (3.0 * a6) * r4
             + (4.0 * a8) * r6
             + (5.0 * a10) * r8)
    return sag, slope, ok


def _trace_values(system, bundle, valid_override=None):
    """Numpy twin of the scalar path; bit-identical values, no tape."""
    o = bundle.origins.T.copy()
    d = bundle.directions.T.copy()
    n_rays = o.shape[1]
    n_surf = len(system.surfaces)
    media = _medium_chain(system, bundle.wavelength)
    free_clip = valid_override is None

    alive = np.ones(n_rays, dtype=bool)
    cos_val = np.ones((n_rays, n_surf))
    stop_xy = np.zeros((n_rays, 2))

    def clip_stop():
        nonlocal alive
        ok = alive & (d[2] > 0.0)
        ts = np.where(ok, (system.stop.vertex_z - o[2]) / np.where(d[2] != 0, d[2], 1.0), 0.0)
        xs = o[0] + d[0] * ts
        ys = o[1] + d[1] * ts
        stop_xy[ok, 0] = xs[ok]
        stop_xy[ok, 1] = ys[ok]
        if free_clip:
            ok &= xs * xs + ys * ys <= system.stop.radius**2
        alive = ok

    for si in range(n_surf):
        if system.stop_index == si:
            clip_stop()
        bs = system.surfaces[si]
        c, k, a4, a6, a8, a10 = bs.coeff_values()
        vz = bs.vertex_z.value
        ok = alive & (d[2] > 0.0)
        safe_dz = np.where(d[2] != 0, d[2], 1.0)
        t = np.where(ok, (vz - o[2]) / safe_dz, 0.0)
        conv = np.zeros(n_rays, dtype=bool)
        x = np.zeros(n_rays)
        y = np.zeros(n_rays)
        r2 = np.zeros(n_rays)
        slope = np.zeros(n_rays)
        for _ in range(NEWTON_MAX_ITER):
            active = ok & ~conv
            if not active.any():
                break
            xx = o[0] + d[0] * t
            yy = o[1] + d[1] * t
            zz = o[2] + d[2] * t
            rr2 = xx * xx + yy * yy
            sag, sl, ok_dom = _sag_slope_np(c, k, a4, a6, a8, a10, rr2, ok.copy())
            ok &= ~(active & ~ok_dom)
            active &= ok
            f = zz - vz - sag
            newly = active & (np.abs(f) < NEWTON_TOL)
            x = np.where(newly, xx, x)
            y = np.where(newly, yy, y)
            r2 = np.where(newly, rr2, r2)
            slope = np.where(newly, sl, slope)
            conv |= newly
            stepping = active & ~newly
            fp = d[2] - sl * (2.0 * (xx * d[0] + yy * d[1]))
            ok &= ~(stepping & (fp == 0.0))
            stepping &= ok
            t = np.where(stepping, t - f / np.where(fp != 0, fp, 1.0), t)
        ok &= conv & (t >= 0.0)
        if free_clip:
            ok &= np.sqrt(r2) <= bs.semi_diameter
        fp = d[2] - slope * (2.0 * (x * d[0] + y * d[1]))
        ok &= fp != 0.0
        sag_b = _sag_np(c, k, a4, a6, a8, a10, r2)
        t = t - (o[2] + d[2] * t - vz - sag_b) / np.where(fp != 0, fp, 1.0)
        xn = o[0] + d[0] * t
        yn = o[1] + d[1] * t
        zn = o[2] + d[2] * t
        r2n = xn * xn + yn * yn
        slope_n = _slope_np(c, k, a4, a6, a8, a10, r2n)
        # refraction
        eta = media[si][2]
        gx = xn * slope_n
        gy = yn * slope_n
        nx = gx * -2.0
        ny = gy * -2.0
        n2 = nx * nx + ny * ny + 1.0
        nn = np.sqrt(n2)
        inx = nx / nn
        iny = ny / nn
        inz = 1.0 / nn
        cosi = d[0] * inx + d[1] * iny + d[2] * inz
        ok &= cosi > 0.0
        kk = 1.0 - (eta * eta) * (1.0 - cosi * cosi)
        ok &= kk >= 0.0
        cost = np.sqrt(np.where(kk >= 0.0, kk, 0.0))
        coef = cosi * eta - cost
        d2x = d[0] * eta - coef * inx
        d2y = d[1] * eta - coef * iny
        d2z = d[2] * eta - coef * inz
        o = np.where(ok, np.stack([xn, yn, zn]), o)
        d = np.where(ok, np.stack([d2x, d2y, d2z]), d)
        cos_val[:, si] = np.where(ok, cosi, 1.0)
        alive = ok

    if system.stop_index == n_surf:
        clip_stop()

    alive &= d[2] > 0.0
    safe_dz = np.where(d[2] != 0, d[2], 1.0)
    ts = (system.sensor.z - o[2]) / safe_dz
    xh = np.where(alive, o[0] + d[0] * ts, 0.0)
    yh = np.where(alive, o[1] + d[1] * ts, 0.0)
    if valid_override is not None:
        alive &= valid_override
    n = n_rays
    return TraceResult(None, np.full(n, -1, np.int32), np.full(n, -1, np.int32),
                       xh, yh, alive, np.full((n, n_surf), -1, np.int32),
                       cos_val, stop_xy, bundle.wavelength, bundle.field_angle)


# ---------------------------------------------------------------------------
# chief ray


def chief_ray(system, field_angle, wavelength):
    """Sensor hit of the ray through the stop center, as detached floats.

    Secant search over the launch-plane y offset; the axial field returns
    (0, 0) by symmetry without tracing.
    """
    if field_angle == 0.0:
        return (0.0, 0.0)
    launch_z, _, center_y, theta = _launch_geometry(system, field_angle)

    def probe(y0):
        bundle = RayBundle(np.array([[0.0, y0, launch_z]]),
                           np.array([[0.0, math.sin(theta), math.cos(theta)]]),
                           wavelength, field_angle, seed=0)
        res = _trace_values(system, bundle,
                            valid_override=np.ones(1, dtype=bool))
        if not res.valid[0]:
            return None, None
        return res.stop_xy[0, 1], res

    y0 = center_y
    r0, _ = probe(y0)
    if r0 is None:
        raise ChiefRayError("chief ray invalid at field %g deg" % field_angle)
    if abs(r0) < CHIEF_TOL:
        y1, r1 = y0, r0
    else:
        y1 = y0 - r0  # straight-line geometry is exact for an empty system
        r1, _ = probe(y1)
        if r1 is None:
            raise ChiefRayError("chief ray invalid at field %g deg" % field_angle)
        it = 0
        while abs(r1) >= CHIEF_TOL:
            it += 1
            if it > CHIEF_MAX_ITER:
                raise ChiefRayError(
                    "chief ray did not converge at field %g deg (residual %g mm)"
                    % (field_angle, abs(r1)))
            if r1 == r0:
                raise ChiefRayError("chief ray search stalled at field %g deg"
                                    % field_angle)
            y2 = y1 - r1 * (y1 - y0) / (r1 - r0)
            y0, r0 = y1, r1
            y1 = y2
            r1, _ = probe(y1)
            if r1 is None:
                raise ChiefRayError("chief ray invalid at field %g deg" % field_angle)
    _, res = probe(y1)
    return (float(res.x_val[0]), float(res.y_val[0]))
