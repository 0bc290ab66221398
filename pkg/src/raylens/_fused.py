"""Glue between the high-level trace/loss code and the compiled kernels.

Packs bound-system parameters into flat arrays, invokes the engine's fused
kernels, and rewraps the outputs. Only imported when the compiled engine
is active.
"""

import numpy as np

from . import raytrace as _rt


def _pack_system(bound, wavelength):
    surfs = bound.surfaces
    n = len(surfs)
    vals = np.empty((n, 8), dtype=np.float64)
    idxs = np.full((n, 7), -1, dtype=np.int32)
    for i, bs in enumerate(surfs):
        c, k, a4, a6, a8, a10, vz = bs.vals
        vals[i] = (c, k, a4, a6, a8, a10, vz, bs.semi_diameter)
        for j, comp in enumerate((bs.c, bs.k, bs.a4, bs.a6, bs.a8, bs.a10, bs.vz)):
            if hasattr(comp, "idx"):
                idxs[i, j] = comp.idx
    eta = np.array([m[2] for m in _rt._medium_chain(bound.system, wavelength)],
                   dtype=np.float64)
    return vals, idxs, eta


def trace_bundle(bound, bundle, valid_override=None):
    system = bound.system
    tape = bound.tape
    n = len(bundle)
    n_surf = len(system.surfaces)
    vals, idxs, eta = _pack_system(bound, bundle.wavelength)

    x_idx = np.full(n, -1, dtype=np.int32)
    y_idx = np.full(n, -1, dtype=np.int32)
    x_val = np.zeros(n)
    y_val = np.zeros(n)
    valid = np.zeros(n, dtype=np.uint8)
    cos_idx = np.full((n, n_surf), -1, dtype=np.int32)
    cos_val = np.ones((n, n_surf))
    stop_xy = np.zeros((n, 2))

    tape.engine.trace_bundle(
        vals, idxs, eta, system.stop_index, system.stop.vertex_z,
        system.stop.radius, valid_override is None, system.sensor.z,
        bundle.origins, bundle.directions,
        x_idx, y_idx, x_val, y_val, valid, cos_idx, cos_val, stop_xy)

    valid = valid.astype(bool)
    if valid_override is not None:
        valid &= valid_override
    return _rt.TraceResult(tape, x_idx, y_idx, x_val, y_val, valid,
                           cos_idx, cos_val, stop_xy, bundle.wavelength,
                           bundle.field_angle)
