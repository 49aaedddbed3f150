"""Build script for the compiled stepping core.

The extension is optional at runtime: if it fails to build (or
``PERCHSIM_NO_EXT=1`` is set) the package falls back to the pure-numpy
backend selected at import time.
"""

import os

import numpy
from setuptools import Extension, setup

ext_modules = []
if not os.environ.get("PERCHSIM_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "perchsim._accel._core",
                ["src/perchsim/_accel/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3", "-fopenmp"],
                extra_link_args=["-fopenmp"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
