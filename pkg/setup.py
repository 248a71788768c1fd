"""Build script for the optional compiled trajectory kernel.

The package works without it; ``iontransport._backend`` falls back to the
pure-Python kernel when the extension cannot be imported.
"""
import os

from setuptools import setup

ext_modules = []
if not os.environ.get("IONTRANSPORT_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [Extension("iontransport._kernels", ["src/iontransport/_kernels.pyx"],
                       include_dirs=[np.get_include()],
                       extra_compile_args=["-O3"],
                       define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")])],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
