"""Durable interfaces: lens prescription files and exporters.

Lens prescriptions are strict versioned JSON; serialization uses Python's
shortest round-trip float representation, so save -> load -> save is
byte-identical and every numeric field survives exactly. Exporters write
a rendered artifact (PPM or SVG) next to a raw CSV so tests and scripts
assert on numbers, never on pixels.
"""

import json
import math

import numpy as np

from . import optics, raytrace
from .errors import LensFileError
from .optics import ApertureStop, AsphericSurface, LensSystem, Sensor

LENS_FORMAT = "raylens-lens"
LENS_VERSION = 1


def _require(mapping, key, where, kind=None):
    if key not in mapping:
        raise LensFileError("%s: missing key %r" % (where, key))
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        raise LensFileError("%s: key %r has wrong type" % (where, key))
    return value


def _reject_unknown(mapping, allowed, where):
    for key in mapping:
        if key not in allowed:
            raise LensFileError("%s: unknown key %r" % (where, key))


def lens_to_dict(system):
    surfaces = []
    for s in system.surfaces:
        c, k, a4, a6, a8, a10 = s.coeff_values()
        surfaces.append({
            "c": c, "k": k, "a4": a4, "a6": a6, "a8": a8, "a10": a10,
            "vertex_z": s.vertex_z.value,
            "semi_diameter": s.semi_diameter,
            "material": s.material_after.name,
        })
    return {
        "format": LENS_FORMAT,
        "version": LENS_VERSION,
        "name": system.name,
        "surfaces": surfaces,
        "stop": {"index": system.stop_index,
                 "vertex_z": system.stop.vertex_z,
                 "radius": system.stop.radius},
        "sensor": {"z": system.sensor.z,
                   "diagonal": system.sensor.diagonal,
                   "pixel_pitch": system.sensor.pixel_pitch,
                   "resolution": list(system.sensor.resolution)},
    }


def lens_from_dict(doc):
    _reject_unknown(doc, {"format", "version", "name", "surfaces", "stop",
                          "sensor"}, "lens file")
    if _require(doc, "format", "lens file") != LENS_FORMAT:
        raise LensFileError("lens file: format is not %r" % LENS_FORMAT)
    if _require(doc, "version", "lens file") != LENS_VERSION:
        raise LensFileError("lens file: unsupported version %r" % doc["version"])
    name = _require(doc, "name", "lens file", str)
    surfaces = []
    for i, sd in enumerate(_require(doc, "surfaces", "lens file", list)):
        where = "surfaces[%d]" % i
        _reject_unknown(sd, {"c", "k", "a4", "a6", "a8", "a10", "vertex_z",
                             "semi_diameter", "material"}, where)
        mat = optics.get_material(_require(sd, "material", where, str))
        try:
            surf = AsphericSurface(
                _require(sd, "c", where), _require(sd, "vertex_z", where),
                _require(sd, "semi_diameter", where), mat,
                conic=_require(sd, "k", where),
                a4=_require(sd, "a4", where), a6=_require(sd, "a6", where),
                a8=_require(sd, "a8", where), a10=_require(sd, "a10", where))
        except ValueError as e:
            raise LensFileError("%s: %s" % (where, e)) from e
        surfaces.append(surf)
    sd = _require(doc, "stop", "lens file", dict)
    _reject_unknown(sd, {"index", "vertex_z", "radius"}, "stop")
    try:
        stop = ApertureStop(_require(sd, "vertex_z", "stop"),
                            _require(sd, "radius", "stop"))
        sn = _require(doc, "sensor", "lens file", dict)
        _reject_unknown(sn, {"z", "diagonal", "pixel_pitch", "resolution"},
                        "sensor")
        sensor = Sensor(_require(sn, "z", "sensor"),
                        _require(sn, "diagonal", "sensor"),
                        _require(sn, "resolution", "sensor", list),
                        _require(sn, "pixel_pitch", "sensor"))
        return LensSystem(surfaces, stop, sensor,
                          stop_index=_require(sd, "index", "stop", int),
                          name=name)
    except ValueError as e:
        raise LensFileError(str(e)) from e


def save_lens(system, path):
    with open(path, "w") as f:
        json.dump(lens_to_dict(system), f, indent=2)
        f.write("\n")


def load_lens(path):
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as e:
            raise LensFileError("%s: invalid JSON (%s)" % (path, e)) from e
    return lens_from_dict(doc)


# ---------------------------------------------------------------------------
# PPM images


def write_ppm(path, pixels):
    """8-bit binary P6 from float pixels in [0, 1] (clamped)."""
    arr = np.clip(np.asarray(pixels, dtype=np.float64), 0.0, 1.0)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("PPM needs an H x W x 3 array")
    data = np.round(arr * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (arr.shape[1], arr.shape[0]))
        f.write(data.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ValueError("%s: not a binary PPM (P6) file" % path)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("%s: only maxval 255 is supported" % path)
    data = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# exporters


def _sibling(path, new_suffix):
    base = str(path)
    for suf in (".ppm", ".csv", ".svg", ".json"):
        if base.endswith(suf):
            base = base[:-len(suf)]
            break
    return base + new_suffix


def export_psf(grids, path):
    """Display PPM (per-channel max-normalized, gamma 1/2.2) plus raw CSV."""
    r, g, b = grids
    ks = r.ks
    img = np.zeros((ks, ks, 3))
    for c, grid in enumerate((r, g, b)):
        peak = grid.values.max()
        if peak > 0:
            img[:, :, c] = (grid.values / peak) ** (1.0 / 2.2)
    write_ppm(_sibling(path, ".ppm"), img)
    with open(_sibling(path, ".csv"), "w") as f:
        f.write("row,col,r,g,b\n")
        for i in range(ks):
            for j in range(ks):
                f.write("%d,%d,%r,%r,%r\n"
                        % (i, j, float(r.values[i, j]), float(g.values[i, j]),
                           float(b.values[i, j])))


def export_spot(results, path):
    """CSV of ray hits: x_mm, y_mm, wavelength_um, valid."""
    with open(path, "w") as f:
        f.write("x_mm,y_mm,wavelength_um,valid\n")
        for res in results:
            for i in range(len(res)):
                f.write("%r,%r,%r,%d\n" % (float(res.x_val[i]),
                                           float(res.y_val[i]),
                                           res.wavelength, int(res.valid[i])))


def _trace_polyline(system, y0, theta_deg, wavelength):
    """Vertex list of one ray's path through the system (value-only)."""
    theta = math.radians(theta_deg)
    launch_z, _, _, _ = raytrace._launch_geometry(system, theta_deg)
    o = np.array([0.0, y0, launch_z])
    d = np.array([0.0, math.sin(theta), math.cos(theta)])
    pts = [(o[2], o[1])]
    for si, s in enumerate(system.surfaces):
        tb, fp, ok = raytrace._newton_values(
            (s.c.value, s.k.value, s.a4.value, s.a6.value, s.a8.value,
             s.a10.value, s.vertex_z.value), *o, *d)
        if not ok:
            return pts, False
        o = o + tb * d
        pts.append((o[2], o[1]))
        n1 = system.medium_before(si).index(wavelength)
        n2 = s.material_after.index(wavelength)
        nvec = np.array(s.normal(o[0], o[1]))
        cosi = float(d @ nvec)
        kk = 1.0 - (n1 / n2) ** 2 * (1.0 - cosi * cosi)
        if cosi <= 0.0 or kk < 0.0:
            return pts, False
        coef = (n1 / n2) * cosi - math.sqrt(kk)
        d = (n1 / n2) * d - coef * nvec
    if d[2] > 0:
        t = (system.sensor.z - o[2]) / d[2]
        o = o + t * d
        pts.append((o[2], o[1]))
    return pts, True


def export_layout(system, path, field_angles=None):
    """SVG cross-section: sag profiles, stop, sensor, and a small ray fan."""
    if field_angles is None:
        field_angles = [0.0]
    half = max([s.semi_diameter for s in system.surfaces] +
               [system.stop.radius, system.sensor.diagonal / 2.0])
    z_lo = min([system.stop.vertex_z] +
               [s.vertex_z.value for s in system.surfaces]) - 1.2
    z_hi = system.sensor.z + 0.3
    scale = 120.0
    width = (z_hi - z_lo) * scale
    height = 2.2 * half * scale

    def X(z):
        return (z - z_lo) * scale

    def Y(y):
        return height / 2.0 - y * scale

    parts = ['<svg xmlns="http://www.w3.org/2000/svg" width="%.0f" height="%.0f" '
             'viewBox="0 0 %.0f %.0f">' % (width, height, width, height),
             '<rect width="100%" height="100%" fill="white"/>']
    parts.append('<line x1="%g" y1="%g" x2="%g" y2="%g" stroke="#999" '
                 'stroke-dasharray="4 4" class="axis"/>'
                 % (X(z_lo), Y(0), X(z_hi), Y(0)))
    for s in system.surfaces:
        ys = np.linspace(-s.semi_diameter, s.semi_diameter, 64)
        zs = [s.vertex_z.value + s.sag(yv * yv) for yv in ys]
        pt = " ".join("%g,%g" % (X(z), Y(y)) for z, y in zip(zs, ys))
        parts.append('<polyline points="%s" fill="none" stroke="black" '
                     'class="surface"/>' % pt)
    for sign in (1.0, -1.0):
        parts.append('<line x1="%g" y1="%g" x2="%g" y2="%g" stroke="black" '
                     'stroke-width="3" class="stop"/>'
                     % (X(system.stop.vertex_z), Y(sign * system.stop.radius),
                        X(system.stop.vertex_z), Y(sign * (system.stop.radius + 0.2))))
    shalf = system.sensor.diagonal / 2.0
    parts.append('<line x1="%g" y1="%g" x2="%g" y2="%g" stroke="blue" '
                 'stroke-width="2" class="sensor"/>'
                 % (X(system.sensor.z), Y(-shalf), X(system.sensor.z), Y(shalf)))
    colors = ("#c22", "#282")
    for fi, angle in enumerate(field_angles[:2]):
        launch_z, radius, center_y, _ = raytrace._launch_geometry(system, angle)
        offsets = [center_y - radius, center_y - radius / 2, center_y,
                   center_y + radius / 2][:4] if radius > 0 else [center_y]
        for y0 in offsets:
            pts, ok = _trace_polyline(system, y0, angle, 0.5893)
            if len(pts) < 2:
                continue
            pt = " ".join("%g,%g" % (X(z), Y(y)) for z, y in pts)
            parts.append('<polyline points="%s" fill="none" stroke="%s" '
                         'stroke-width="0.8" class="ray"/>'
                         % (pt, colors[fi % 2]))
    parts.append("</svg>")
    with open(path, "w") as f:
        f.write("\n".join(parts) + "\n")


def export_report(metrics, path, metadata=None):
    """JSON report: deterministic results payload plus a metadata block."""
    from . import __version__
    meta = {"tool": "raylens", "tool_version": __version__}
    if metadata:
        meta.update(metadata)
    doc = {"metadata": meta, "results": metrics}
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def report_payload_bytes(path):
    """Canonical bytes of the results block (determinism checks)."""
    with open(path) as f:
        doc = json.load(f)
    return json.dumps(doc["results"], sort_keys=True).encode()
