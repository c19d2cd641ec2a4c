import os

import numpy as np
from setuptools import Extension, setup

# SEMISEG3D_NO_EXT=1 skips the compiled kernels; the package then runs on the
# numpy/scipy fallback.
ext_modules = []
if not os.environ.get("SEMISEG3D_NO_EXT"):
    from Cython.Build import cythonize

    ext_modules = cythonize(
        Extension(
            "semiseg3d._ckernels",
            ["src/semiseg3d/_ckernels.pyx"],
            include_dirs=[np.get_include()],
            define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            extra_compile_args=["-O3"],
        ),
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=ext_modules)
