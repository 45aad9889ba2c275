#!/usr/bin/env python3
"""Setup script for compatibility with older pip versions.

Modern pip reads from pyproject.toml, but older versions need this file.
"""
from setuptools import setup, find_packages

setup(
    name="sinc-speaker",
    version="0.1.0",
    description="Speaker recognition from raw waveforms with learnable sinc filters and curricular margin losses",
    author="sinc-speaker Contributors",
    license="MIT",
    python_requires=">=3.9",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    install_requires=[
        "click>=8.1.0",
        "rich>=13.0.0",
        "numpy>=1.22.0",
        "soundfile>=0.12.0",
    ],
    entry_points={
        "console_scripts": [
            "sinc-speaker=sinc_speaker.cli:main",
        ],
    },
)
