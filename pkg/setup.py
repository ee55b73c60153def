"""Build script for the compiled top-k scan kernel.

The extension is optional: if the build fails (no compiler, no Cython),
the package falls back to the numpy scan at import time.
"""

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

ext = Extension(
    "patmatch._scan",
    sources=["src/patmatch/_scan.pyx"],
    include_dirs=[numpy.get_include()],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(
    ext_modules=cythonize([ext], language_level=3) if cythonize else [],
)
