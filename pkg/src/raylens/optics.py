"""Materials, aspheric surfaces, and the lens-system prescription.

Conventions: +z runs from object space toward the sensor, distances are in
mm, wavelengths in um, angles in radians internally and degrees at public
interfaces. Every optimizable quantity (curvature, vertex position, even
aspheric coefficients a4..a10, and the conic, frozen by default) is held
as a named ``Parameter`` so optimizers and tape binding can enumerate
them.

Surface sag uses the even-asphere model

    z(r2) = c*r2 / (1 + sqrt(1 - (1+k) c^2 r2)) + a4 r2^2 + a6 r2^3
            + a8 r2^4 + a10 r2^5,          r2 = x^2 + y^2

and materials follow a two-term Cauchy dispersion n(l) = A + B/l^2 fitted
from catalog (n_d, V_d) pairs at the d/F/C lines, which gives the correct
blue-to-red index ordering at the three design wavelengths.
"""

import math

from . import autodiff as ad
from .errors import DomainError, LensFileError

# design wavelengths (um): F', d-ish, C spectral lines used for RGB tracing
WL_RED = 0.6563
WL_GREEN = 0.5893
WL_BLUE = 0.4861

# Cauchy fit anchors: helium d line plus the F/C hydrogen lines
_WL_D = 0.5876
_WL_F = 0.4861
_WL_C = 0.6563

WAVELENGTH_BAND = (0.4, 0.8)

MIN_AXIAL_GAP = 0.05


class Parameter:
    """A named scalar the optimizer may own. Frozen parameters bind as constants."""

    __slots__ = ("name", "value", "frozen")

    def __init__(self, name, value, frozen=False):
        self.name = name
        self.value = float(value)
        self.frozen = bool(frozen)

    def __repr__(self):
        tag = ", frozen" if self.frozen else ""
        return "Parameter(%s=%r%s)" % (self.name, self.value, tag)


class Material:
    """Two-term Cauchy glass model: n(l) = A + B / l^2, l in um."""

    def __init__(self, name, cauchy_a, cauchy_b):
        self.name = name
        self.cauchy_a = float(cauchy_a)
        self.cauchy_b = float(cauchy_b)
        if name != "air":
            if self.cauchy_b <= 0.0:
                raise ValueError("material %r: normal dispersion needs B > 0" % name)
            for wl in WAVELENGTH_BAND:
                if self.index(wl) <= 1.0:
                    raise ValueError(
                        "material %r: n(%g um) <= 1 violates the glass model" % (name, wl)
                    )

    @classmethod
    def from_nd_vd(cls, name, n_d, v_d):
        """Fit A, B from the d-line index and Abbe number.

        Uses n_F - n_C = (n_d - 1) / V_d with the Cauchy relation
        n_F - n_C = B (1/l_F^2 - 1/l_C^2).
        """
        spread = 1.0 / _WL_F**2 - 1.0 / _WL_C**2
        b = (n_d - 1.0) / v_d / spread
        a = n_d - b / _WL_D**2
        return cls(name, a, b)

    def index(self, wavelength):
        if self.name == "air":
            return 1.0
        return self.cauchy_a + self.cauchy_b / (wavelength * wavelength)

    @property
    def is_air(self):
        return self.name == "air"

    def __repr__(self):
        return "Material(%r, A=%g, B=%g)" % (self.name, self.cauchy_a, self.cauchy_b)

    def __eq__(self, other):
        return (
            isinstance(other, Material)
            and self.name == other.name
            and self.cauchy_a == other.cauchy_a
            and self.cauchy_b == other.cauchy_b
        )


AIR = Material("air", 1.0, 0.0)

# common cellphone-lens plastics, from catalog (n_d, V_d)
MATERIALS = {
    "air": AIR,
    "pmma": Material.from_nd_vd("pmma", 1.4918, 57.4),
    "pc": Material.from_nd_vd("pc", 1.5855, 29.9),
    "coc": Material.from_nd_vd("coc", 1.5337, 56.2),
    "okp4": Material.from_nd_vd("okp4", 1.6073, 27.0),
}


def get_material(name):
    try:
        return MATERIALS[name]
    except KeyError:
        raise LensFileError(
            "unknown material %r (available: %s)"
            % (name, ", ".join(sorted(MATERIALS)))
        ) from None


def refractive_index(material, wavelength):
    """n at ``wavelength`` (um); air is exactly 1.0."""
    if not (WAVELENGTH_BAND[0] <= wavelength <= WAVELENGTH_BAND[1]):
        raise DomainError(
            "refractive_index: wavelength %g um outside modeled band [%g, %g]"
            % (wavelength, WAVELENGTH_BAND[0], WAVELENGTH_BAND[1])
        )
    return material.index(wavelength)


def sag_expr(c, k, a4, a6, a8, a10, r2):
    """Sag only; operation order mirrored by the tracing kernels."""
    cc = c * c
    w = (1.0 + k) * cc
    u = w * r2
    s = ad.sqrt(1.0 - u)
    den = 1.0 + s
    num = c * r2
    base = num / den
    r4 = r2 * r2
    r6 = r4 * r2
    r8 = r6 * r2
    r10 = r8 * r2
    return base + a4 * r4 + a6 * r6 + a8 * r8 + a10 * r10


def slope_expr(c, k, a4, a6, a8, a10, r2):
    """d(sag)/d(r2) only; operation order mirrored by the tracing kernels."""
    cc = c * c
    w = (1.0 + k) * cc
    u = w * r2
    s = ad.sqrt(1.0 - u)
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


def sag_profile(c, k, a4, a6, a8, a10, r2):
    """Sag and d(sag)/d(r2) sharing subexpressions.

    Works on Variables or floats; convenient when both are wanted at the
    same point.
    """
    cc = c * c
    w = (1.0 + k) * cc
    u = w * r2
    s = ad.sqrt(1.0 - u)
    den = 1.0 + s
    num = c * r2
    base = num / den
    r4 = r2 * r2
    r6 = r4 * r2
    r8 = r6 * r2
    r10 = r8 * r2
    sag = base + a4 * r4 + a6 * r6 + a8 * r8 + a10 * r10
    slope = (
        c / den
        + num * w / ((2.0 * s) * (den * den))
        + (2.0 * a4) * r2
        + (3.0 * a6) * r4
        + (4.0 * a8) * r6
        + (5.0 * a10) * r8
    )
    return sag, slope


class AsphericSurface:
    """One rotationally symmetric refracting boundary."""

    def __init__(self, curvature, vertex_z, semi_diameter, material_after,
                 conic=0.0, a4=0.0, a6=0.0, a8=0.0, a10=0.0, name="s"):
        if semi_diameter <= 0:
            raise ValueError("semi_diameter must be positive")
        self.name = name
        self.c = Parameter(name + ".c", curvature)
        self.k = Parameter(name + ".k", conic, frozen=True)
        self.a4 = Parameter(name + ".a4", a4)
        self.a6 = Parameter(name + ".a6", a6)
        self.a8 = Parameter(name + ".a8", a8)
        self.a10 = Parameter(name + ".a10", a10)
        self.vertex_z = Parameter(name + ".z", vertex_z)
        self.semi_diameter = float(semi_diameter)
        self.material_after = material_after
        self.validate()

    def rename(self, name):
        self.name = name
        for attr, suffix in (("c", ".c"), ("k", ".k"), ("a4", ".a4"), ("a6", ".a6"),
                             ("a8", ".a8"), ("a10", ".a10"), ("vertex_z", ".z")):
            getattr(self, attr).name = name + suffix

    def validate(self):
        r2 = self.semi_diameter**2
        if (1.0 + self.k.value) * self.c.value**2 * r2 >= 1.0:
            raise ValueError(
                "surface %s: sag is not real over the clear aperture "
                "((1+k) c^2 r^2 >= 1 at r = %g)" % (self.name, self.semi_diameter)
            )

    def parameters(self):
        return [self.c, self.k, self.a4, self.a6, self.a8, self.a10, self.vertex_z]

    def coeff_values(self):
        return (self.c.value, self.k.value, self.a4.value, self.a6.value,
                self.a8.value, self.a10.value)

    def sag(self, r2):
        """Sag at squared radius ``r2``; accepts a Variable or a float."""
        c, k, a4, a6, a8, a10 = self.coeff_values()
        sag, _ = sag_profile(c, k, a4, a6, a8, a10, r2)
        return ad.unwrap(sag)

    def normal(self, x, y):
        """Unit surface normal at (x, y), oriented toward +z."""
        r2 = x * x + y * y
        c, k, a4, a6, a8, a10 = self.coeff_values()
        _, slope = sag_profile(c, k, a4, a6, a8, a10, r2)
        gx = x * slope
        gy = y * slope
        nx = gx * -2.0
        ny = gy * -2.0
        n2 = nx * nx + ny * ny + 1.0
        nn = ad.sqrt(n2)
        return (ad.unwrap(nx / nn), ad.unwrap(ny / nn), ad.unwrap(1.0 / nn))


class ApertureStop:
    def __init__(self, vertex_z, radius):
        if radius <= 0:
            raise ValueError("stop radius must be positive")
        self.vertex_z = float(vertex_z)
        self.radius = float(radius)

    def __repr__(self):
        return "ApertureStop(z=%g, radius=%g)" % (self.vertex_z, self.radius)


class Sensor:
    def __init__(self, z, diagonal=4.0, resolution=(1080, 1920), pixel_pitch=None):
        self.z = float(z)
        self.diagonal = float(diagonal)
        self.resolution = (int(resolution[0]), int(resolution[1]))
        if pixel_pitch is None:
            pixel_pitch = diagonal / math.hypot(*self.resolution)
        self.pixel_pitch = float(pixel_pitch)
        got = self.pixel_pitch * math.hypot(*self.resolution)
        if abs(got - self.diagonal) > 1e-3 * self.diagonal:
            raise ValueError(
                "sensor geometry inconsistent: pitch*resolution diagonal %g mm "
                "vs stated %g mm" % (got, self.diagonal)
            )

    def __repr__(self):
        return "Sensor(z=%g, diag=%g, pitch=%g)" % (self.z, self.diagonal, self.pixel_pitch)


class LensSystem:
    """Ordered prescription: surfaces, one aperture stop, one sensor.

    ``stop_index`` counts how many surfaces precede the stop plane.
    """

    def __init__(self, surfaces, stop, sensor, stop_index=0, name="lens"):
        self.name = name
        self.surfaces = list(surfaces)
        self.stop = stop
        self.sensor = sensor
        self.stop_index = int(stop_index)
        for i, s in enumerate(self.surfaces):
            s.rename("s%d" % i)
        self.validate()

    def element_sequence(self):
        """(kind, object) pairs in axial order: 'surface' entries plus one 'stop'."""
        seq = []
        for i, s in enumerate(self.surfaces):
            if i == self.stop_index:
                seq.append(("stop", self.stop))
            seq.append(("surface", s))
        if self.stop_index >= len(self.surfaces):
            seq.append(("stop", self.stop))
        return seq

    def validate(self):
        if not 0 <= self.stop_index <= len(self.surfaces):
            raise ValueError("stop_index out of range")
        zs = [(kind, obj, obj.vertex_z.value if kind == "surface" else obj.vertex_z)
              for kind, obj in self.element_sequence()]
        prev = None
        for kind, obj, z in zs:
            if prev is not None and z - prev < MIN_AXIAL_GAP - 1e-12:
                raise ValueError(
                    "axial gap below %g mm at %s (z=%g after z=%g)"
                    % (MIN_AXIAL_GAP, kind, z, prev)
                )
            prev = z
        if zs and self.sensor.z - zs[-1][2] < MIN_AXIAL_GAP - 1e-12:
            raise ValueError("sensor must sit at least %g mm behind the last element"
                             % MIN_AXIAL_GAP)
        for s in self.surfaces:
            s.validate()

    def parameters(self):
        out = []
        for s in self.surfaces:
            out.extend(s.parameters())
        return out

    def medium_before(self, surface_index):
        """Material on the incoming side of surface ``surface_index``."""
        if surface_index == 0:
            return AIR
        return self.surfaces[surface_index - 1].material_after

    def param_values(self):
        return [p.value for p in self.parameters()]

    def set_param_values(self, values):
        for p, v in zip(self.parameters(), values):
            p.value = float(v)

    def copy(self):
        surfaces = []
        for s in self.surfaces:
            c, k, a4, a6, a8, a10 = s.coeff_values()
            surfaces.append(AsphericSurface(
                c, s.vertex_z.value, s.semi_diameter, s.material_after,
                conic=k, a4=a4, a6=a6, a8=a8, a10=a10, name=s.name))
        return LensSystem(surfaces, ApertureStop(self.stop.vertex_z, self.stop.radius),
                          Sensor(self.sensor.z, self.sensor.diagonal,
                                 self.sensor.resolution, self.sensor.pixel_pitch),
                          stop_index=self.stop_index, name=self.name)
