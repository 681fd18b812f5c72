"""Exact simulation, correlation hierarchy and bound checks for the continuum logistic model."""

__version__ = "0.1.0"

from .kernels import DerivedConstants, KernelSpec, ModelError, ModelSpec, derive_constants, time_horizon
from .simulator import Fixed, PoissonHomogeneous, PoissonInhomogeneous, ThinnedPoisson, run

__all__ = [
    "__version__",
    "DerivedConstants",
    "KernelSpec",
    "ModelError",
    "ModelSpec",
    "derive_constants",
    "time_horizon",
    "Fixed",
    "PoissonHomogeneous",
    "PoissonInhomogeneous",
    "ThinnedPoisson",
    "run",
]
