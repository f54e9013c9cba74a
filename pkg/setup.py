import numpy
from setuptools import Extension, setup

try:
    import scipy.linalg  # the compiled core links BLAS through scipy's pxd
    from Cython.Build import cythonize
except ImportError:
    cythonize = None

# The compiled core is optional: the package falls back to the pure-numpy
# kernels in blockattn._kernels.pure when the extension is unavailable.
ext_modules = []
if cythonize is not None:
    ext_modules = cythonize(
        [
            Extension(
                "blockattn._kernels._core",
                ["src/blockattn/_kernels/_core.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
