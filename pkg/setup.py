import os

from setuptools import Extension, setup

ext_modules = []
if os.environ.get("RUNE_PURE_PYTHON", "") in ("", "0"):
    try:
        from Cython.Build import cythonize
    except ImportError:
        cythonize = None
    if cythonize is not None:
        ext_modules = cythonize(
            [
                Extension(
                    "rune.kernels._core",
                    ["src/rune/kernels/_core.pyx"],
                    extra_compile_args=["-O3"],
                    libraries=["m"],
                )
            ],
            compiler_directives={"language_level": "3"},
        )

setup(ext_modules=ext_modules)
