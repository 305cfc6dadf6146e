"""Build the optional compiled MMD kernel.

The package works without it; ``fraug.kernels`` falls back to numpy when the
extension is missing. Build in place with ``python3 setup.py build_ext --inplace``.
"""

import os

from setuptools import setup

ext_modules = []
if os.environ.get("FRAUG_NO_EXTENSION") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "fraug._mmd_core",
                    ["src/fraug/_mmd_core.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
