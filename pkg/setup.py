#!/usr/bin/env python3

from setuptools import setup, find_packages

setup(
    name="situformer",
    version="1.0.0",
    packages=find_packages(exclude=("fixtures", "docs", "config")),
    py_modules=["situformer"],
    install_requires=[
        "numpy>=1.24",
        "pillow",
        "pyyaml>=6.0",
        "psutil>=5.9.0",
    ],
    entry_points={
        "console_scripts": [
            "situformer=lib.cli:main",
        ],
    },
    python_requires=">=3.8",
    author="SituFormer Team",
    description="Desk-scale grounded situation recognition with a numpy autodiff core",
    long_description=open("README.md").read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
)
