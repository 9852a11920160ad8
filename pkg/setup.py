"""Build script for the compiled kernel core.

The package works without the extension (a numpy fallback is selected at
import time), so a missing compiler or Cython only costs speed.
"""

from setuptools import Extension, setup

try:
    import numpy as np
    from Cython.Build import cythonize
except ImportError:  # pure-python install
    ext_modules = []
else:
    ext_modules = cythonize(
        [
            Extension(
                "rcil.kernels._native",
                ["src/rcil/kernels/_native.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3", "-march=native", "-funroll-loops"],
            )
        ],
        language_level=3,
    )

setup(ext_modules=ext_modules)
