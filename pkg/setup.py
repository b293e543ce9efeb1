from setuptools import Extension, setup
from Cython.Build import cythonize

# -ffp-contract=off keeps the compiler from fusing multiply-adds, which
# would break bit-identity with the pure-Python kernel twin.
ext_modules = [
    Extension(
        "seqlora._kernels.ckern",
        ["src/seqlora/_kernels/ckern.pyx"],
        extra_compile_args=["-O2", "-ffp-contract=off"],
    )
]

setup(
    ext_modules=cythonize(ext_modules, language_level="3"),
)
