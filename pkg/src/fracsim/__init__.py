"""Coupled surface-BEM / channel-FEM lifecycle simulator for pressurized 3D fractures.

The package couples a weakly-singular symmetric Galerkin boundary element
discretization of rock elasticity (and, in the production stage, reservoir
Darcy flow) with a finite element discretization of lubrication channel flow
inside the fracture.  A transient propagation engine grows the fracture
surfaces with adaptive remeshing; the evolved mesh is handed to a steady-state
production solve with no geometry conversion.
"""

__version__ = "0.1.0"

from .errors import (
    CacheInvalidError,
    ConfigError,
    ElementQualityError,
    FracsimError,
    HostSearchError,
    MeshInvariantError,
    NonConvergenceError,
    QuadratureError,
    SolverUnstableError,
    TimeStepRejected,
)

__all__ = [
    "FracsimError",
    "MeshInvariantError",
    "ElementQualityError",
    "QuadratureError",
    "CacheInvalidError",
    "SolverUnstableError",
    "NonConvergenceError",
    "TimeStepRejected",
    "HostSearchError",
    "ConfigError",
    "__version__",
]
