"""Builds the optional Cython acceleration kernels.

The package is fully functional without them (numpy fallbacks dispatch
at runtime), so any build failure here downgrades to a pure-Python
install instead of aborting.
"""

import os

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class OptionalBuildExt(build_ext):
    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler/toolchain
            print(f"warning: skipping optional extension build: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            if "-march=native" in (ext.extra_compile_args or []):
                print("warning: retrying extension build without -march=native")
                ext.extra_compile_args = [a for a in ext.extra_compile_args
                                          if a != "-march=native"]
                try:
                    super().build_extension(ext)
                    return
                except Exception as exc2:
                    exc = exc2
            print(f"warning: optional extension {ext.name} not built: {exc}")


def extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        print("warning: Cython unavailable; building without acceleration kernels")
        return []
    flags = ["-O3"]
    if os.environ.get("HDRTONE_PORTABLE_BUILD") != "1":
        flags.append("-march=native")
    ext = Extension("hdrtone.neural._kernels",
                    ["src/hdrtone/neural/_kernels.pyx"],
                    extra_compile_args=flags)
    return cythonize([ext], language_level=3)


setup(ext_modules=extensions(), cmdclass={"build_ext": OptionalBuildExt})
