from setuptools import setup, find_packages

setup(
    name="msbm",
    version="0.1.0",
    description="Multi-marginal Schrödinger bridge matching on population snapshots",
    packages=find_packages(exclude=["tests"]),
    python_requires=">=3.9",
    install_requires=[
        "numpy",
        "scipy",
        "qcodes",
        "plottr",
        "PyQt5",  # plottr imports Qt bindings via qtpy at import time
        "tqdm",
    ],
    extras_require={"test": ["pytest", "hypothesis", "pot"]},
    entry_points={"console_scripts": ["msbm=msbm.cli:main"]},
)
