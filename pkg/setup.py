import re

from setuptools import find_namespace_packages, setup


# Ensure we match the version set in netcausal/aipw/version.py
try:
    filepath = "netcausal/aipw/version.py"
    with open(filepath) as version_file:
        (__version__,) = re.findall('__version__ = "(.*)"', version_file.read())
except Exception as error:
    assert False, "Error: Could not open '%s' due %s\n" % (filepath, error)

INSTALL_REQUIRES = [
    "numpy>=1.17",
    "scipy>=1.4",
    "pyyaml",
    "pandas",
    "joblib",
    "tqdm",
]

TESTS_REQUIRE = ["pytest", "parameterized"]

QUALITY_REQUIRES = [
    "black",
    "isort",
    "flake8",
]

EXTRAS_REQUIRE = {"tests": TESTS_REQUIRE, "quality": QUALITY_REQUIRES}

setup(
    name="netcausal-aipw",
    version=__version__,
    description="Doubly robust estimation of treatment effects from observational data on a known network, with "
    "spillover through treatments and confounders, dependency-aware cross-fitting and network-corrected inference.",
    long_description=open("README.md", "r", encoding="utf-8").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "License :: OSI Approved :: Apache Software License",
        "Intended Audience :: Education",
        "Intended Audience :: Science/Research",
        "Operating System :: OS Independent",
        "Programming Language :: Python :: 3.7",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    keywords="causal inference, network interference, spillover, doubly robust, cross-fitting, random forest",
    author="The netcausal Authors",
    license="Apache",
    packages=find_namespace_packages(include=["netcausal*"]),
    install_requires=INSTALL_REQUIRES,
    extras_require=EXTRAS_REQUIRE,
    entry_points={"console_scripts": ["netaipw=netcausal.aipw.cli:main"]},
    include_package_data=True,
    zip_safe=False,
)
