from setuptools import setup, find_packages

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

setup(
    name="value_gradient_iteration",
    version="0.1.0",
    description="Value-gradient iteration with quadratic value functions for convex stochastic control",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=find_packages(exclude=["tests"]),
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.19.0",
        "pandas>=1.1.0",
        "cvxpy>=1.3.0",
        "clarabel>=0.5.0",
    ],
    extras_require={
        "test": [
            "pytest>=7.0",
            "scipy>=1.7.0",
        ],
    },
    entry_points={
        "console_scripts": [
            "vgi=value_gradient_iteration.cli:main",
        ],
    },
)
