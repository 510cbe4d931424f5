"""Build script for the compiled kernel lane.

The package is pure Python plus one optional Cython extension,
``fewdiff.numerics._fused``, holding the fused elementwise/reduction
kernels (GELU, layer norm, softmax, Adam). If the extension cannot be
built the install still succeeds and the numpy fallback lane is used;
``fewdiff.numerics.kernels.get_backend()`` reports which lane is active.
"""

import sys

from setuptools import setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    """Build the extension if possible, warn and continue otherwise."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # compiler missing, cython missing, ...
            self._warn(exc)

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            self._warn(exc)

    @staticmethod
    def _warn(exc):
        print(
            f"warning: building fewdiff.numerics._fused failed ({exc}); "
            "falling back to the pure-numpy kernel lane",
            file=sys.stderr,
        )


def extensions():
    try:
        from Cython.Build import cythonize
        import numpy as np
    except ImportError:
        return []
    from setuptools import Extension

    ext = Extension(
        "fewdiff.numerics._fused",
        sources=["src/fewdiff/numerics/_fused.pyx"],
        include_dirs=[np.get_include()],
        # -ffast-math lets gcc vectorize tanh/exp through libmvec;
        # -march=native unlocks the wide (AVX2/AVX-512) variants
        extra_compile_args=["-O3", "-ffast-math", "-march=native"],
        libraries=["m"],
    )
    return cythonize([ext], language_level=3)


setup(
    cmdclass={"build_ext": OptionalBuildExt},
    ext_modules=extensions(),
)
