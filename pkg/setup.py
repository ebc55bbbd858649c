import os

import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -ffp-contract=off keeps multiply and add as separate roundings so the
# compiled kernels accumulate in exactly the same order as the reference loops.
extra = ["-O3", "-ffp-contract=off"]
if os.environ.get("PBBN_NATIVE"):
    extra.append("-march=native")

extensions = [
    Extension(
        "pbbn.kernels._ckernels",
        [os.path.join("src", "pbbn", "kernels", "_ckernels.pyx")],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=extra,
    )
]

setup(
    ext_modules=cythonize(
        extensions,
        compiler_directives={
            "language_level": "3",
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
            "initializedcheck": False,
        },
    )
)
