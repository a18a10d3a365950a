"""Build script for the compiled convolution kernels.

The extension is optional: if no C compiler is available the install still
succeeds and sarslide falls back to the pure-numpy kernels at import time.
"""

import warnings

import numpy as np
from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

from Cython.Build import cythonize


class OptionalBuildExt(build_ext):
    """build_ext that degrades to the pure-numpy backend on compiler failure."""

    def run(self):
        try:
            super().run()
        except Exception as exc:
            warnings.warn(f"compiled kernels skipped ({exc}); using numpy backend")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"building {ext.name} failed ({exc}); using numpy backend")


extensions = [
    Extension(
        "sarslide.backend._convkernels",
        sources=["src/sarslide/backend/_convkernels.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3", "-funroll-loops"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(
    ext_modules=cythonize(extensions, language_level=3),
    cmdclass={"build_ext": OptionalBuildExt},
)
