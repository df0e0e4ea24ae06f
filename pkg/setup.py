"""Build script for the optional compiled score kernels.

The package works without the extension (a numpy fallback is selected at
import time), so any build failure here degrades to the pure-Python wheel
instead of aborting the install.
"""

import numpy
from setuptools import Extension, setup

ext_modules = []
try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "channeldiff._score_kernels",
                ["src/channeldiff/_score_kernels.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except ImportError:
    pass

setup(ext_modules=ext_modules)
