import numpy as np
from Cython.Build import cythonize
from setuptools import Extension, setup

# -O3 only: -ffast-math would break IEEE semantics and the byte-level
# reproducibility the CLI guarantees.
extensions = [
    Extension(
        "nlkacz._kernels._compiled",
        ["src/nlkacz/_kernels/_compiled.pyx"],
        include_dirs=[np.get_include()],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
        extra_compile_args=["-O3"],
    )
]

setup(
    ext_modules=cythonize(extensions, compiler_directives={"language_level": "3"}),
)
