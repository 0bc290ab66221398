"""Tape engine selection.

The compiled Cython engine is preferred; the pure-Python engine is a
drop-in fallback selected at import time. Set ``RAYLENS_PURE=1`` to force
the fallback (used by the benchmark and parity tests).
"""

import os
import warnings

from ._pytape import PyTape

if os.environ.get("RAYLENS_PURE", "") == "1":
    _ctape = None
else:
    try:
        from ._tapecore import CTape as _ctape
    except ImportError:
        _ctape = None
        warnings.warn(
            "raylens compiled core not available; using the pure-Python tape "
            "(correct but much slower). Build with `pip install -e .` or "
            "`python setup.py build_ext --inplace`.",
            stacklevel=1,
        )

CTape = _ctape
Engine = _ctape if _ctape is not None else PyTape


def engine_name():
    return "compiled" if Engine is not PyTape else "pure-python"
