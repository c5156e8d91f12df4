"""Build script for the optional compiled convolution core.

The package is fully functional without the extension (a numpy fallback
is selected at import time).  `python setup.py build_ext --inplace` or a
normal pip install compiles the fast path when Cython and a C compiler
are available.
"""
import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "mtsconv.kernels._convcore",
                ["src/mtsconv/kernels/_convcore.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
else:
    ext_modules = []

setup(ext_modules=ext_modules)
