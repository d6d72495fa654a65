"""Build script for the optional compiled kernel core.

The package works without the extension (a NumPy fallback is selected at
import time), so a missing compiler or Cython only costs speed, not
functionality.
"""

import sys

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "xstream.numcore._ckernels",
                ["src/xstream/numcore/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    print("Cython or NumPy unavailable at build time; skipping compiled kernels.",
          file=sys.stderr)
    extensions = []

setup(ext_modules=extensions)
