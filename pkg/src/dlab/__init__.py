"""Numerical laboratory for dissipation enhancement by incompressible flows on the torus."""
from importlib.metadata import PackageNotFoundError, version

from .spectral import ConfigurationError, Grid, ScalarField, SpectrumField, VelocityField

try:
    __version__ = version("dlab")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

__all__ = ["ConfigurationError", "Grid", "ScalarField", "SpectrumField", "VelocityField",
           "__version__"]
