from setuptools import Extension, setup

try:
    from Cython.Build import cythonize
except ImportError:  # the pure-Python loop is used instead
    extensions = []
else:
    extensions = cythonize(
        [
            Extension(
                "detcloud._vmcore",
                ["src/detcloud/_vmcore.pyx"],
                extra_compile_args=["-O3"],
                optional=True,
            )
        ],
        compiler_directives={"language_level": "3"},
    )

setup(ext_modules=extensions)
