"""Build script: compiles the optional likelihood-kernel extension.

The package works without the extension (a numpy fallback is selected at
import time), so a failed compile degrades to a pure-Python install instead
of aborting.
"""

from setuptools import Extension, setup

ext_modules = []
try:
    import numpy as np
    from Cython.Build import cythonize

    ext_modules = cythonize(
        [
            Extension(
                "mpslam._kernels._core",
                sources=["src/mpslam/_kernels/_core.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
                extra_compile_args=["-O3"],
            )
        ],
        language_level=3,
    )
except Exception as exc:  # pragma: no cover - build-environment dependent
    print(f"mpslam: skipping compiled kernels ({exc}); numpy fallback will be used")

setup(ext_modules=ext_modules)
