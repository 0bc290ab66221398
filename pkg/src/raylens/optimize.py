"""Loss functions, AdamW with parameter groups, and the design drivers.

Three drivers share one step loop:

* ``design_imaging`` - classical design against the mean RMS spot radius;
* ``design_task``    - from-scratch design against a frozen classifier's
  cross-entropy on simulated captures (the network never updates);
* ``finetune_e2e``   - joint or partially-frozen co-optimization.

Parameter groups follow the per-order learning-rate decay for aspheric
coefficients: base rate for curvature, vertex position, and a4, then a
0.02 factor per additional even order (a6, a8, a10). Feasibility is kept
by projection after every step: vertex ordering with a minimum axial gap,
sag realness, and sane curvature bounds.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import imaging, psf, raytrace, tasknet
from .errors import DegeneratePsfError, DegenerateTraceError
from .optics import (
    AIR,
    MATERIALS,
    MIN_AXIAL_GAP,
    ApertureStop,
    AsphericSurface,
    LensSystem,
    Sensor,
)

BASE_LR = 1e-4
ORDER_DECAY = 0.02


@dataclass
class ParamGroup:
    name: str
    members: list
    lr: float
    weight_decay: float = 0.0


@dataclass
class AdamState:
    """Decoupled-weight-decay Adam moments per parameter handle."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


@dataclass
class DesignConfig:
    mode: str = "imaging"  # imaging | task | e2e
    field_angles: tuple = tuple(np.linspace(0.0, 34.4, 9))
    rays_train: int = 256
    rays_eval: int = 4096
    iterations: int = 2000
    seed: int = 0
    angle_penalty_weight: float = 0.1
    angle_threshold_deg: float = 60.0
    min_gap: float = MIN_AXIAL_GAP
    lr: float = BASE_LR
    psf_kernel: int = psf.DEFAULT_KERNEL
    kernel_crop: int = imaging.CAPTURE_KERNEL
    # a 32px toy patch stands in for a 224px training image, so its pixel
    # pitch on the sensor is 224/32 = 7x the native pitch
    psf_pitch_scale: float = 7.0
    batch_size: int = 8
    lr_net: float = 1e-5
    threads: int = 1
    eval_every: int = 0  # 0 = no mid-run evals

    def __post_init__(self):
        if self.rays_eval < self.rays_train:
            raise ValueError("rays_eval must be >= rays_train")
        angles = tuple(float(a) for a in self.field_angles)
        if list(angles) != sorted(angles) or (angles and angles[0] != 0.0):
            raise ValueError("field angles must be ascending and start at 0")
        self.field_angles = angles


def param_groups(system, lr=BASE_LR):
    """Base group (curvature, position, a4) plus decayed higher orders."""
    groups = {
        "base": ParamGroup("base", [], lr),
        "a6": ParamGroup("a6", [], lr * ORDER_DECAY),
        "a8": ParamGroup("a8", [], lr * ORDER_DECAY**2),
        "a10": ParamGroup("a10", [], lr * ORDER_DECAY**3),
    }
    for s in system.surfaces:
        groups["base"].members.extend([s.c, s.vertex_z, s.a4])
        groups["a6"].members.append(s.a6)
        groups["a8"].members.append(s.a8)
        groups["a10"].members.append(s.a10)
    return list(groups.values())


def adamw_step(state, groups, grads, system=None, min_gap=MIN_AXIAL_GAP):
    """One decoupled-weight-decay Adam update plus feasibility projection.

    ``grads`` maps Parameter handles to adjoints; members without a
    gradient this step keep their moments but do not move. Non-finite
    gradients abort the step before any parameter changes.
    """
    for g in groups:
        for p in g.members:
            if p in grads and not math.isfinite(grads[p]):
                raise ValueError(
                    "non-finite gradient for parameter %s; step aborted" % p.name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for g in groups:
        for p in g.members:
            if p not in grads:
                continue
            gr = grads[p]
            m = state.m.get(p, 0.0)
            v = state.v.get(p, 0.0)
            m = b1 * m + (1 - b1) * gr
            v = b2 * v + (1 - b2) * gr * gr
            state.m[p] = m
            state.v[p] = v
            mh = m / (1 - b1**state.t)
            vh = v / (1 - b2**state.t)
            p.value -= g.lr * (mh / (math.sqrt(vh) + state.eps) + g.weight_decay * p.value)
    if system is not None:
        project_feasible(system, min_gap=min_gap)


def project_feasible(system, min_gap=MIN_AXIAL_GAP):
    """Clamp the prescription back onto the feasible set.

    Vertex order (including the stop plane) is restored front to back with
    the minimum axial gap, the last vertex is kept clear of the sensor,
    and curvatures stay inside the sag-realness bound for each aperture.
    """
    floor_z = None
    for kind, obj in system.element_sequence():
        z = obj.vertex_z if kind == "stop" else obj.vertex_z.value
        if floor_z is not None and z < floor_z:
            z = floor_z
            if kind == "surface":
                obj.vertex_z.value = z
        floor_z = z + min_gap
    if system.surfaces:
        ceil_z = system.sensor.z - min_gap
        for s in reversed(system.surfaces):
            if s.vertex_z.value > ceil_z:
                s.vertex_z.value = ceil_z
            ceil_z = s.vertex_z.value - min_gap
    for s in system.surfaces:
        r2 = s.semi_diameter**2
        kk = 1.0 + s.k.value
        if kk > 0.0:
            cmax = 0.999 / math.sqrt(kk * r2)
            s.c.value = min(max(s.c.value, -cmax), cmax)


# ---------------------------------------------------------------------------
# losses


def spot_loss(system, config, step_seed, tape=None, bound=None,
              rays=None, collect=None):
    """Mean differentiable RMS spot radius over fields and wavelengths.

    Also stacks incidence-cosine records into ``collect`` (a list) so the
    angle penalty can reuse the same traces.
    """
    rays = rays or config.rays_train
    terms = []
    for angle in config.field_angles:
        for wl in (psf.WL_RED, psf.WL_GREEN, psf.WL_BLUE):
            bundle = raytrace.sample_pupil_rays(system, angle, wl, rays, step_seed)
            if bound is not None:
                res = raytrace.trace_to_sensor(None, bundle, bound=bound)
            else:
                res = raytrace.trace_to_sensor(system, bundle, tape=tape)
            if res.n_valid < 2:
                raise DegenerateTraceError(
                    "field %g deg, %g um: %d valid rays" %
                    (angle, wl, res.n_valid))
            terms.append(psf.rms_spot(res))
            if collect is not None:
                collect.append(res)
    return ad.sum_vars(terms) / float(len(terms))


def angle_penalty(results, threshold_deg, weight, tape=None):
    """Quadratic hinge on incidence angles beyond ``threshold_deg``.

    Mean over valid ray-surface events of relu(cos(threshold) - cos)^2,
    scaled by ``weight``. Returns a constant 0 when nothing was traced.
    """
    thr = math.cos(math.radians(threshold_deg))
    idxs = []
    vals = []
    for res in results:
        v = res.valid
        if res.cos_idx.size == 0 or not v.any():
            continue
        idxs.append(res.cos_idx[v].ravel())
        vals.append(res.cos_val[v].ravel())
    if not idxs:
        return ad.Variable(0.0)
    idx = np.ascontiguousarray(np.concatenate(idxs), dtype=np.int32)
    val = np.ascontiguousarray(np.concatenate(vals))
    if tape is not None and getattr(tape.engine, "has_fused", False):
        i, value = tape.engine.penalty_mean(idx, val, thr)
        mean = ad.Variable(value) if i < 0 else ad.Variable(value, tape, int(i),
                                                            tape.generation)
    else:
        terms = []
        for j in range(len(idx)):
            if tape is not None and idx[j] >= 0:
                cv = ad.Variable(val[j], tape, int(idx[j]), tape.generation)
            else:
                cv = ad.Variable(val[j])
            d = thr - cv
            r = ad.relu(d)
            terms.append(r * r)
        mean = ad.sum_vars(terms) / float(len(terms))
    return mean * weight


# ---------------------------------------------------------------------------
# initialization


def init_from_scratch(element_count, focal_target=2.912, stop_radius=0.52,
                      sensor=None, seed=0, glass_thickness=0.6,
                      materials=("pmma", "pc")):
    """Random flat-ish prescription: stop, then element_count glass slabs.

    Curvatures draw from U(-0.02, 0.02)/mm, all aspheric coefficients are
    zero, and the sensor sits near 1.3x the focal target.
    """
    if element_count < 1:
        raise ValueError("element_count must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, element_count]))
    sensor_z = 1.3 * focal_target
    if sensor is None:
        sensor = Sensor(z=sensor_z)
    else:
        sensor = Sensor(sensor_z, sensor.diagonal, sensor.resolution,
                        sensor.pixel_pitch)
    stop_gap = 0.25
    # compress inter-element air for high element counts so the track
    # leaves back-focal room before the sensor
    budget = 0.72 * sensor_z - stop_gap - element_count * glass_thickness
    air_gap = max(0.1, min(0.4, budget / max(element_count - 1, 1)))
    track = stop_gap + element_count * glass_thickness \
        + (element_count - 1) * air_gap
    if track >= sensor_z - MIN_AXIAL_GAP:
        raise ValueError(
            "track %g mm does not fit before the sensor at %g mm" %
            (track, sensor_z))
    surfaces = []
    z = 0.0
    stop = ApertureStop(z, stop_radius)
    z += stop_gap
    half_image = sensor.diagonal / 2.0
    for e in range(element_count):
        frac = (z + glass_thickness) / sensor_z
        sd = stop_radius + (half_image * 1.3 - stop_radius) * frac + 0.2
        c1, c2 = rng.uniform(-0.02, 0.02, 2)
        mat = MATERIALS[materials[e % len(materials)]]
        surfaces.append(AsphericSurface(c1, z, sd, mat))
        z += glass_thickness
        surfaces.append(AsphericSurface(c2, z, sd + 0.1, AIR))
        z += air_gap
    return LensSystem(surfaces, stop, sensor, stop_index=0,
                      name="scratch-%d" % element_count)


# ---------------------------------------------------------------------------
# drivers


@dataclass
class History:
    """Per-step loss records plus optional evaluation checkpoints."""

    columns: tuple
    rows: list = field(default_factory=list)

    def append(self, *row):
        self.rows.append(tuple(row))

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            w.writerows(self.rows)


def _step_seed(seed, step):
    return int(np.random.SeedSequence([seed, step]).generate_state(1)[0])


def eval_spot(system, config, seed_tag=0):
    """Non-differentiable mean RMS spot with the evaluation ray count."""
    terms = []
    for angle in config.field_angles:
        for wl in (psf.WL_RED, psf.WL_GREEN, psf.WL_BLUE):
            bundle = raytrace.sample_pupil_rays(system, angle, wl,
                                                config.rays_eval, seed_tag)
            res = raytrace.trace_to_sensor(system, bundle)
            if res.n_valid < 2:
                raise DegenerateTraceError(
                    "field %g deg, %g um: %d valid rays at evaluation"
                    % (angle, wl, res.n_valid))
            hits = res.hits_xy()[res.valid]
            cen = hits.mean(axis=0)
            terms.append(float(np.sqrt(((hits - cen) ** 2).sum(axis=1).mean())))
    return float(np.mean(terms))


def design_imaging(system, config, log=None):
    """Classical spot-size design from the given starting prescription.

    Fresh stratified ray seeds each step; returns (best system, history).
    """
    groups = param_groups(system, lr=config.lr)
    state = AdamState()
    history = History(("step", "loss", "spot", "angle_penalty", "eval_rms"))
    best = (math.inf, system.copy())
    fails = 0
    tape = ad.Tape()
    for step in range(config.iterations):
        seed = _step_seed(config.seed, step)
        tape.reset()
        bound = raytrace.bind_system(system, tape)
        try:
            collect = []
            spot = spot_loss(system, config, seed, bound=bound, collect=collect)
            pen = angle_penalty(collect, config.angle_threshold_deg,
                                config.angle_penalty_weight, tape=tape)
            total = spot + pen
            tape.backward(total)
            grads = bound.gradients()
            adamw_step(state, groups, grads, system=system,
                       min_gap=config.min_gap)
        except (DegenerateTraceError, ValueError) as e:
            fails += 1
            if fails >= 10:
                raise DegenerateTraceError(
                    "10 consecutive failed steps (last: %s)" % e) from e
            history.append(step, math.nan, math.nan, math.nan, math.nan)
            continue
        fails = 0
        eval_rms = math.nan
        if config.eval_every and step % config.eval_every == 0:
            eval_rms = eval_spot(system, config)
        pen_val = pen.val if isinstance(pen, ad.Variable) else float(pen)
        history.append(step, total.val, spot.val, pen_val, eval_rms)
        if total.val < best[0]:
            best = (total.val, system.copy())
        if log and step % max(1, config.iterations // 20) == 0:
            log("step %d: loss %.6f (spot %.6f)" % (step, total.val, spot.val))
    return best[1], history


def _task_step(system, net, patches, config, seed, lens_groups, lens_state,
               net_opt, update_lens, update_net, tape=None):
    """One capture-supervised step; returns (ce, penalty value)."""
    if tape is None:
        tape = ad.Tape()
    else:
        tape.reset()
    bound = raytrace.bind_system(system, tape)
    collect = []
    field_grids = []
    pitch = system.sensor.pixel_pitch * config.psf_pitch_scale
    for angle in config.field_angles:
        grids = psf.psf_rgb(system, angle, config.rays_train, seed,
                            tape=tape, bound=bound, ks=config.psf_kernel,
                            pitch=pitch, collect=collect)
        if config.kernel_crop and config.kernel_crop < config.psf_kernel:
            grids = tuple(g.crop(config.kernel_crop) for g in grids)
        field_grids.append(grids)
    pen = angle_penalty(collect, config.angle_threshold_deg,
                        config.angle_penalty_weight, tape=tape)

    images = np.stack([p.pixels for p in patches])
    labels = np.array([p.label for p in patches])
    n_caps = len(patches) * len(field_grids)
    seeds = []
    ce_total = 0.0
    wgrads_total = None
    for grids in field_grids:
        kernel = np.stack([g.values for g in grids], axis=-1)
        caps = np.stack([imaging.capture_with_kernel(img, kernel)
                         for img in images])
        probs, cache = net.forward_batch(caps)
        ce = -np.log(np.maximum(probs[np.arange(len(labels)), labels], 1e-300))
        ce_total += float(ce.sum())
        dcaps, wgrads = net.backward_batch(cache, labels, mean=False)
        dcaps /= n_caps
        if update_net:
            if wgrads_total is None:
                wgrads_total = {k: v / n_caps for k, v in wgrads.items()}
            else:
                for k, v in wgrads.items():
                    wgrads_total[k] += v / n_caps
        if update_lens:
            for b in range(len(patches)):
                dk = imaging.kernel_adjoint_for(images[b], dcaps[b],
                                                grids[0].ks)
                for c, g in enumerate(grids):
                    for (ii, jj), var in g.cell_vars.items():
                        adj = dk[ii, jj, c]
                        if adj != 0.0:
                            seeds.append((var, adj))
    ce_mean = ce_total / n_caps

    if update_lens:
        pen_seed = []
        if isinstance(pen, ad.Variable) and pen.tape is not None:
            pen_seed = [(pen, 1.0)]
        if seeds or pen_seed:
            tape.backward(seeds=seeds + pen_seed)
            grads = bound.gradients()
            adamw_step(lens_state, lens_groups, grads, system=system,
                       min_gap=config.min_gap)
    if update_net and wgrads_total is not None:
        net_opt.step(wgrads_total)
    pen_val = pen.val if isinstance(pen, ad.Variable) else float(pen)
    return ce_mean, pen_val


def _checkpoint_accuracy(system, net, glyph_spec, config, n=60):
    """Small-sample capture accuracy for history checkpoints."""
    val = tasknet.generate_glyphs(glyph_spec, n, "val")
    return tasknet.evaluate(net, val, system=system,
                            field_angles=config.field_angles,
                            rays_per_field=config.rays_train, seed=config.seed,
                            kernel_crop=config.kernel_crop,
                            threads=max(1, config.threads))


class _NetAdam:
    """Minimal Adam for the classifier's weight arrays."""

    def __init__(self, net, lr):
        self.net = net
        self.lr = lr
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in net.params().items()}
        self.v = {k: np.zeros_like(v) for k, v in net.params().items()}

    def step(self, grads):
        self.t += 1
        params = self.net.params()
        for k, g in grads.items():
            self.m[k] = 0.9 * self.m[k] + 0.1 * g
            self.v[k] = 0.999 * self.v[k] + 0.001 * g * g
            mh = self.m[k] / (1 - 0.9**self.t)
            vh = self.v[k] / (1 - 0.999**self.t)
            params[k] -= self.lr * mh / (np.sqrt(vh) + 1e-8)


def design_task(system, net, glyph_spec, config, log=None):
    """From-scratch lens design supervised by the frozen classifier.

    The network weights are asserted bit-identical before and after.
    """
    before = net.snapshot()
    groups = param_groups(system, lr=config.lr)
    state = AdamState()
    history = History(("step", "ce", "angle_penalty", "eval_accuracy"))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 999]))
    pool = tasknet.generate_glyphs(glyph_spec, max(512, 4 * config.batch_size),
                                   "train")
    fails = 0
    tape = ad.Tape()
    for step in range(config.iterations):
        seed = _step_seed(config.seed, step)
        idx = rng.choice(len(pool), size=config.batch_size, replace=False)
        batch = [pool[i] for i in idx]
        try:
            ce, pen = _task_step(system, net, batch, config, seed,
                                 groups, state, None, True, False, tape=tape)
        except (DegeneratePsfError, DegenerateTraceError, ValueError) as e:
            fails += 1
            if fails >= 10:
                raise DegeneratePsfError(
                    "10 consecutive failed steps (last: %s)" % e) from e
            history.append(step, math.nan, math.nan, math.nan)
            continue
        fails = 0
        acc = math.nan
        if config.eval_every and step % config.eval_every == 0:
            acc = _checkpoint_accuracy(system, net, glyph_spec, config)
        history.append(step, ce, pen, acc)
        if log and step % max(1, config.iterations // 20) == 0:
            log("step %d: CE %.4f penalty %.5f" % (step, ce, pen))
    after = net.params()
    for k, v in before.items():
        if not np.array_equal(v, after[k]):
            raise AssertionError("frozen network changed during design (%s)" % k)
    return system, history


def finetune_e2e(system, net, glyph_spec, config, freeze="none", log=None):
    """Joint or partially-frozen capture-supervised optimization."""
    if freeze not in ("lens", "net", "none"):
        raise ValueError("freeze must be 'lens', 'net', or 'none'")
    update_lens = freeze != "lens"
    update_net = freeze != "net"
    groups = param_groups(system, lr=config.lr) if update_lens else []
    state = AdamState()
    net_opt = _NetAdam(net, config.lr_net) if update_net else None
    history = History(("step", "ce", "angle_penalty", "eval_accuracy"))
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 999]))
    pool = tasknet.generate_glyphs(glyph_spec, max(512, 4 * config.batch_size),
                                   "train")
    fails = 0
    tape = ad.Tape()
    for step in range(config.iterations):
        seed = _step_seed(config.seed, step)
        idx = rng.choice(len(pool), size=config.batch_size, replace=False)
        batch = [pool[i] for i in idx]
        try:
            ce, pen = _task_step(system, net, batch, config, seed,
                                 groups, state, net_opt, update_lens, update_net,
                                 tape=tape)
        except (DegeneratePsfError, DegenerateTraceError, ValueError) as e:
            fails += 1
            if fails >= 10:
                raise DegeneratePsfError(
                    "10 consecutive failed steps (last: %s)" % e) from e
            history.append(step, math.nan, math.nan, math.nan)
            continue
        fails = 0
        acc = math.nan
        if config.eval_every and step % config.eval_every == 0:
            acc = _checkpoint_accuracy(system, net, glyph_spec, config)
        history.append(step, ce, pen, acc)
        if log and step % max(1, config.iterations // 20) == 0:
            log("step %d: CE %.4f penalty %.5f" % (step, ce, pen))
    return system, net, history
