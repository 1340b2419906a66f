"""Build script for the compiled kernel extension.

The package works without the extension (pure-numpy fallback selected at
import time); the extension just makes the conv/pool hot loops faster.
"""
import os

from setuptools import Extension, setup


def _extensions():
    try:
        from Cython.Build import cythonize
    except ImportError:
        return []
    ext = Extension(
        "yoloface.ops._kernels",
        sources=[os.path.join("src", "yoloface", "ops", "_kernels.pyx")],
        extra_compile_args=["-O3", "-fopenmp"],
        extra_link_args=["-fopenmp"],
    )
    return cythonize([ext], language_level=3)


setup(ext_modules=_extensions())
