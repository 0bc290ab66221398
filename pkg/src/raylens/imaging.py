"""Camera-capture simulation by per-field PSF convolution.

The image-space side is dense numpy with a hand-written adjoint: the
convolution's gradient with respect to the kernel re-enters the scalar
tape as adjoint seeds on the PSF grid cells. Scalarizing a 32x32x31x31
multiply onto the tape would be absurd; this split keeps the tape for the
optics only.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import convolve2d, correlate2d

from . import psf as psf_mod
from .errors import DegeneratePsfError

DEFAULT_FIELD_COUNT = 9
CAPTURE_KERNEL = 17  # center-crop of the 51-cell grid used for 32px patches


@dataclass
class ImagePatch:
    """H x W x 3 pixels in [0, 1] plus an optional class label."""

    pixels: np.ndarray
    label: int = None
    field_angle: float = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError("pixels must be H x W x 3")

    @classmethod
    def ingest(cls, pixels, label=None, field_angle=None):
        """Constructor that enforces the [0, 1] range contract."""
        pixels = np.asarray(pixels, dtype=np.float64)
        if pixels.size and (pixels.min() < 0.0 or pixels.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1] on ingestion")
        return cls(pixels, label=label, field_angle=field_angle)


def _kernel_stack(grids):
    if len(grids) != 3:
        raise ValueError("expected 3 PSF grids (R, G, B), got %d" % len(grids))
    ks = grids[0].ks
    if any(g.ks != ks for g in grids):
        raise ValueError("PSF grids must share one kernel size")
    return np.stack([g.values for g in grids], axis=-1)


def capture_with_kernel(pixels, kernel):
    """Per-channel 2D convolution with reflect padding, same-size output."""
    if kernel.ndim != 3 or kernel.shape[2] != pixels.shape[2]:
        raise ValueError("kernel channels %s do not match image channels %s"
                         % (kernel.shape, pixels.shape))
    pad = kernel.shape[0] // 2
    out = np.empty_like(pixels)
    for c in range(pixels.shape[2]):
        padded = np.pad(pixels[:, :, c], pad, mode="reflect")
        out[:, :, c] = convolve2d(padded, kernel[:, :, c], mode="valid")
    return out


def kernel_adjoint_for(pixels, grad_out, ks):
    """Adjoint of ``capture_with_kernel`` w.r.t. a ks-sized kernel."""
    if grad_out.shape != pixels.shape:
        raise ValueError("gradient shape %s does not match image shape %s"
                         % (grad_out.shape, pixels.shape))
    pad = ks // 2
    out = np.empty((ks, ks, pixels.shape[2]))
    for c in range(pixels.shape[2]):
        padded = np.pad(pixels[:, :, c], pad, mode="reflect")
        corr = correlate2d(padded, grad_out[:, :, c], mode="valid")
        out[:, :, c] = corr[::-1, ::-1]
    return out


def convolve_patch(patch, grids):
    """Simulated capture of ``patch`` through three per-channel PSF grids."""
    kernel = _kernel_stack(grids)
    out = capture_with_kernel(patch.pixels, kernel)
    return ImagePatch(out, label=patch.label, field_angle=patch.field_angle)


def simulate_capture_batch(system, patches, field_angles, rays_per_field,
                           seed, ks=psf_mod.DEFAULT_KERNEL,
                           kernel_crop=CAPTURE_KERNEL, pitch_scale=1.0,
                           threads=1):
    """Convolve every patch with every field's PSF (field-major order).

    Returns len(patches) * len(field_angles) captures tagged with their
    field angle. Deterministic in ``seed``.
    """
    if not len(field_angles):
        raise ValueError("field_angles must be nonempty")
    pitch = system.sensor.pixel_pitch * pitch_scale

    def one_field(fi_angle):
        fi, angle = fi_angle
        try:
            grids = psf_mod.psf_rgb(system, angle, rays_per_field, seed, ks=ks,
                                    pitch=pitch)
        except DegeneratePsfError as e:
            raise DegeneratePsfError(
                "field %d (%g deg): %s" % (fi, angle, e)) from e
        if kernel_crop is not None and kernel_crop < ks:
            grids = tuple(g.crop(kernel_crop) for g in grids)
        kernel = _kernel_stack(grids)
        return [ImagePatch(capture_with_kernel(p.pixels, kernel),
                           label=p.label, field_angle=float(angle))
                for p in patches]

    jobs = list(enumerate(field_angles))
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as ex:
            per_field = list(ex.map(one_field, jobs))
    else:
        per_field = [one_field(j) for j in jobs]
    out = []
    for caps in per_field:
        out.extend(caps)
    return out


def test_chart(size=32):
    """Deterministic chart for PSNR probes: checker, ramps, and a disk."""
    y, x = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    checker = ((x // 4 + y // 4) % 2).astype(np.float64)
    ramp = x / (size - 1.0)
    r2 = (x - size / 2.0) ** 2 + (y - size / 2.0) ** 2
    disk = (r2 <= (size / 4.0) ** 2).astype(np.float64)
    px = np.stack([checker, ramp, disk], axis=-1)
    return ImagePatch(px)


def psnr(reference, test):
    """Peak signal-to-noise ratio in dB with MAX=1, capped at 99 dB."""
    a = reference.pixels if isinstance(reference, ImagePatch) else np.asarray(reference)
    b = test.pixels if isinstance(test, ImagePatch) else np.asarray(test)
    if a.shape != b.shape:
        raise ValueError("shape mismatch: %s vs %s" % (a.shape, b.shape))
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 99.0
    return min(99.0, 10.0 * np.log10(1.0 / mse))


def backward_to_psf(grad_capture, patch, grids):
    """Adjoint seeds for the tape: dLoss/dPSF-cell for each channel grid.

    ``grad_capture`` is dLoss/dCapture for one simulated patch; the return
    value is a list of (cell Variable, adjoint) pairs ready for
    ``Tape.backward(seeds=...)``.
    """
    ks = grids[0].ks
    dk = kernel_adjoint_for(patch.pixels, grad_capture, ks)
    seeds = []
    for c, g in enumerate(grids):
        for (i, j), var in g.cell_vars.items():
            adj = dk[i, j, c]
            if adj != 0.0:
                seeds.append((var, adj))
    return seeds
