import os

from setuptools import setup

ext_modules = []
if not os.environ.get("SHUFFLEFL_NO_EXT"):
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "shufflefl._kernels",
                    ["src/shufflefl/_kernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # pure-Python fallback in shufflefl._pyshuffle is used instead
        ext_modules = []

setup(ext_modules=ext_modules)
