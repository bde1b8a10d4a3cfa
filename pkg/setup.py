import numpy as np
from setuptools import Extension, setup

from Cython.Build import cythonize

extensions = [
    Extension(
        "sanet._kernels._native",
        sources=["src/sanet/_kernels/_native.pyx"],
        include_dirs=[np.get_include(), "src/sanet/_kernels"],
        depends=["src/sanet/_kernels/rowops.h"],
        extra_compile_args=["-O3", "-march=native"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
