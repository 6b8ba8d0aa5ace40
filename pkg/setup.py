"""Build script: compiles the optional likelihood kernel extension.

If Cython or a C compiler is unavailable the package still installs; the
pure-NumPy backend is selected at import time instead.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("LONGIRT_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext = Extension(
            "longirt._kernels._core",
            ["src/longirt/_kernels/_core.pyx"],
            include_dirs=[np.get_include()],
            extra_compile_args=["-O3", "-fopenmp"],
            extra_link_args=["-fopenmp"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext_modules = cythonize([ext], language_level=3)
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
