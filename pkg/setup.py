import numpy
from setuptools import setup, Extension

# The geometry kernels (farthest point sampling, KNN grouping) are the only
# loop-bound hot spots; everything else is BLAS-backed. Build them as a C
# extension when Cython is available, otherwise install pure Python and let
# pvdiff.geom fall back to the numpy kernels at import time.
try:
    from Cython.Build import cythonize

    extensions = cythonize(
        [
            Extension(
                "pvdiff._geom_cy",
                sources=["src/pvdiff/_geom_cy.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": 3},
    )
except ImportError:
    extensions = []

setup(ext_modules=extensions)
