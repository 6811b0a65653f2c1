"""Build script for the optional compiled kernels.

    pip install -e . --no-build-isolation

If Cython or a C compiler is unavailable the package installs without the
extension and falls back to the numpy kernels at import time.
"""
import os

from setuptools import setup

ext_modules = []
if os.environ.get("CHOICEKIT_NO_EXT", "") != "1":
    try:
        import numpy
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "choicekit._kernels",
                    ["src/choicekit/_kernels.pyx"],
                    include_dirs=[numpy.get_include()],
                    extra_compile_args=["-O3", "-fno-math-errno"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
