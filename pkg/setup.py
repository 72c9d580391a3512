import os

import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the package falls back to the numpy kernels
    cythonize = None

ext_modules = []
if cythonize is not None and not os.environ.get("NNCSL_PURE_PYTHON"):
    ext_modules = cythonize(
        [
            Extension(
                "nncsl.kernels._snn",
                ["src/nncsl/kernels/_snn.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": 3},
    )

setup(ext_modules=ext_modules)
