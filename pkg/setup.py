from setuptools import Extension, setup
from Cython.Build import cythonize

extensions = [
    Extension(
        "rflow.kernels._core",
        ["src/rflow/kernels/_core.pyx"],
        # -ffp-contract=off: no FMA fusing, so the compiled kernel stays
        # bit-identical to the pure-Python reference backend.
        extra_compile_args=["-O3", "-ffp-contract=off"],
    )
]

setup(ext_modules=cythonize(extensions, language_level=3))
