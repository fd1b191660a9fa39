from setuptools import setup, find_packages

__version__ = "0.3.0"

install_requires = [
    "numpy>=1.18.1",
    "PyYAML>=5.3",
    "pandas>=1.0",
    "networkx>=2.5",
    "simpy>=4.0",
    "matplotlib>=3.3",
]

extras_require = {
    "solver": ["pulp>=2.4"],
    "test": ["pytest>=6.0", "pulp>=2.4"],
}

setup(
    name="uniplan",
    version=__version__,
    packages=find_packages("src"),
    package_dir={"": "src"},
    package_data={"uniplan": ["data/*.json", "planner.yaml"]},
    install_requires=install_requires,
    extras_require=extras_require,
    entry_points={"console_scripts": ["uniplan=uniplan.cli:main"]},
)
