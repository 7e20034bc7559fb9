"""Build script: compiles the optional Cython kernel for mask ranking.

The extension is best-effort; when no compiler (or Cython) is available the
package installs anyway and falls back to the NumPy implementation selected
at import time in ``fovrecon._kernels``.
"""

from setuptools import setup

ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension

    ext_modules = cythonize(
        [
            Extension(
                "fovrecon._kernels.native",
                ["src/fovrecon/_kernels/native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={"language_level": "3"},
    )
except Exception as exc:  # pragma: no cover - exercised only on broken toolchains
    print(f"fovrecon: skipping native kernel build ({exc}); NumPy fallback will be used")

setup(ext_modules=ext_modules)
