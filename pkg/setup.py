import numpy as np
from setuptools import setup, Extension

try:
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "hoirecon._kernels",
                ["src/hoirecon/_kernels.pyx"],
                include_dirs=[np.get_include()],
                extra_compile_args=["-O3"],
            )
        ]
    )
except ImportError:
    # The package falls back to the pure-numpy kernels at import time.
    ext_modules = []

setup(ext_modules=ext_modules)
