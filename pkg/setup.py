import numpy
from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# -ffp-contract=off is load-bearing: FMA contraction would skip the
# per-operation rounding step the emulation relies on.
ext = Extension(
    "lowprec_gp._core",
    ["src/lowprec_gp/_core.pyx"],
    include_dirs=[numpy.get_include()],
    extra_compile_args=["-O3", "-ffp-contract=off"],
    define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
)

setup(ext_modules=cythonize([ext], language_level=3) if cythonize else [])
