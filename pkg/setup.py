"""Build script for the C matmul kernels.

The kernels are compiled with contraction disabled so that every output
element is the plain mul-then-add left-to-right sum over k, bit-identical
to a naive triple loop. -march=native is used when available; the build
falls back to portable flags if the probe fails.
"""

import os
import tempfile

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

BASE_FLAGS = ["-O3", "-ffp-contract=off", "-fno-fast-math"]
NATIVE_FLAGS = ["-march=native", "-mprefer-vector-width=512"]


class ProbedBuildExt(build_ext):
    def _flag_works(self, flag):
        with tempfile.TemporaryDirectory() as tmp:
            src = os.path.join(tmp, "probe.c")
            with open(src, "w") as f:
                f.write("int main(void) { return 0; }\n")
            try:
                self.compiler.compile([src], output_dir=tmp, extra_postargs=[flag])
            except Exception:
                return False
        return True

    def build_extensions(self):
        extra = list(BASE_FLAGS)
        for flag in NATIVE_FLAGS:
            if self._flag_works(flag):
                extra.append(flag)
        for ext in self.extensions:
            ext.extra_compile_args = extra
        super().build_extensions()


def numpy_include():
    import numpy

    return numpy.get_include()


setup(
    ext_modules=[
        Extension(
            "spinn._kernels",
            sources=["src/spinn/_kernels.c"],
            include_dirs=[numpy_include()],
        )
    ],
    cmdclass={"build_ext": ProbedBuildExt},
)
