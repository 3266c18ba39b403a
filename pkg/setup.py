"""Build hook for the optional compiled GRU kernel.

If Cython, numpy or a C compiler is missing the package still installs
and ``milnet.kernels`` falls back to the numpy implementation.
"""

import os

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as err:  # noqa: BLE001
            print(f"warning: skipping compiled kernels ({err})")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as err:  # noqa: BLE001
            print(f"warning: failed to build {ext.name} ({err})")


def extensions():
    if os.environ.get("MILNET_PURE_PYTHON", "") not in ("", "0"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "milnet._gru_ext",
        ["src/milnet/_gru_ext.pyx"],
        include_dirs=[np.get_include()],
        extra_compile_args=["-O3"],
        define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
    )
    return cythonize([ext], compiler_directives={"language_level": "3"}, quiet=True)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
