"""Build the compiled scan kernels; the package still imports without them."""
import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("CHRNN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        pass
    else:
        ext_modules = cythonize(
            [
                Extension(
                    "chrnn._scan_ext",
                    ["src/chrnn/_scan_ext.pyx"],
                    include_dirs=[np.get_include()],
                    # no FMA contraction keeps the float64 path reproducible;
                    # no trapping math lets the gate loops if-convert and vectorize
                    extra_compile_args=["-O3", "-ffp-contract=off", "-fno-trapping-math"],
                )
            ],
            compiler_directives={
                "language_level": "3",
                "boundscheck": False,
                "wraparound": False,
                "cdivision": True,
                "initializedcheck": False,
            },
        )

setup(ext_modules=ext_modules)
