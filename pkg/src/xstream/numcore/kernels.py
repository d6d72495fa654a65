"""Kernel backend selection.

The compiled extension is preferred; the NumPy fallback keeps the package
fully functional without a C toolchain. ``XSTREAM_KERNELS=numpy`` forces the
fallback (used by the benchmark to compare both). Dense matmul is delegated
to NumPy's BLAS in both backends.
"""

import os

from . import pykernels

try:
    from . import _ckernels
except ImportError:
    _ckernels = None

_FORCED = os.environ.get("XSTREAM_KERNELS", "").strip().lower()

if _FORCED in ("numpy", "python", "py"):
    active = pykernels
elif _FORCED in ("compiled", "c", "cython"):
    if _ckernels is None:
        raise ImportError("XSTREAM_KERNELS requested the compiled backend, "
                          "but xstream.numcore._ckernels is not built")
    active = _ckernels
else:
    active = _ckernels if _ckernels is not None else pykernels

BACKEND = active.BACKEND_NAME


def available_backends():
    """Importable kernel backends by name, for benchmarks and A/B tests."""
    found = {"numpy": pykernels}
    if _ckernels is not None:
        found["compiled"] = _ckernels
    return found
