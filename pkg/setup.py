import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("SHIPLEARN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize

        ext = Extension(
            "shiplearn._chains_cy",
            ["src/shiplearn/_chains_cy.pyx"],
            include_dirs=[np.get_include()],
            # -ffp-contract=off keeps the compiled kernels bit-identical to
            # the pure-Python fallback (no FMA reassociation).
            extra_compile_args=["-O3", "-ffp-contract=off"],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        )
        ext.optional = True
        ext_modules = cythonize([ext], compiler_directives={"language_level": "3"})
    except ImportError:
        ext_modules = []

setup(ext_modules=ext_modules)
