"""Build script for the optional compiled kernel core.

The package is pure Python plus one Cython extension holding the fused
recurrent-cell kernels.  If the extension fails to build
(no compiler, no Cython) the install still succeeds and the package falls
back to the numpy kernels at import time.
"""

import numpy
from setuptools import setup
from setuptools.extension import Extension

try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "optim4rl.kernels._core",
                ["src/optim4rl/kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                # -O3 without -ffast-math: vectorize but keep strict IEEE
                # semantics so batch and row-wise evaluation stay bit-equal.
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        language_level=3,
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
