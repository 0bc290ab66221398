"""raylens: differentiable geometric-optics lens design.

Traces rays through multi-element aspheric lenses on a reverse-mode tape,
builds point-spread functions by bilinear ray splatting, simulates camera
captures by PSF convolution, and optimizes lens prescriptions against
either a spot-size loss or the cross-entropy of a frozen classifier.
"""

from ._core import engine_name

__version__ = "0.1.0"

__all__ = ["engine_name", "__version__"]
