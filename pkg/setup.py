import warnings

from setuptools import Extension, setup

# The compiled kernel core is optional: the package falls back to the
# vectorized numpy implementation when the extension is absent.
ext_modules = []
try:
    import numpy
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "phs_lab._kernels_cy",
                ["src/phs_lab/_kernels_cy.pyx"],
                include_dirs=[numpy.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build environments without Cython
    warnings.warn(f"building without the compiled kernel core: {exc}")

setup(ext_modules=ext_modules)
