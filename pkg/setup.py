#!/usr/bin/env python

from setuptools import find_packages, setup

version = "1.0.0dev"

with open("README.md") as f:
    readme = f.read()

with open("requirements.txt") as f:
    required = f.read().splitlines()

setup(
    name="duplex",
    version=version,
    description="Dual learning of streaming speech recognition and synthesis with a fusion-ready transducer.",
    long_description=readme,
    long_description_content_type="text/markdown",
    keywords=["duplex", "speech recognition", "text-to-speech", "dual learning", "transducer", "language model"],
    entry_points={
        "console_scripts": ["duplex=duplex.__main__:run_duplex"],
    },
    python_requires=">=3.9, <4",
    install_requires=required,
    packages=find_packages(exclude=("tests", "conf")),
    package_data={"duplex": ["report-template/*.md"]},
    include_package_data=True,
    zip_safe=False,
)
