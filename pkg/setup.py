import os

from setuptools import setup

ext_modules = []
if os.environ.get("MMSIM_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        ext_modules = cythonize(
            [
                Extension(
                    "mmsim.kernels._ckernels",
                    ["src/mmsim/kernels/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=["-O3"],
                    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        # Cython or numpy missing at build time: ship the numpy fallback only.
        ext_modules = []

setup(ext_modules=ext_modules)
