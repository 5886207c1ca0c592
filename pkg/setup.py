"""Build script.

The compiled kernels are optional: if Cython or a C compiler is missing the
package still works through the pure NumPy implementations selected at import
time by perfmdp._kernels. Set PERF_LMDP_SKIP_EXT=1 to skip the extension
build.
"""

import os

from setuptools import Extension, setup


def _extensions():
    if os.environ.get("PERF_LMDP_SKIP_EXT") == "1":
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "perfmdp._kernels._fast",
        ["src/perfmdp/_kernels/_fast.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"})


setup(ext_modules=_extensions())
