"""Simulation and reconstruction toolkit for EIT shape sensing of soft fluidic actuators."""

__version__ = "0.1.0"

from .mesh import ElectrodePatch, Mesh, MeshError

__all__ = ["ElectrodePatch", "Mesh", "MeshError", "__version__"]
