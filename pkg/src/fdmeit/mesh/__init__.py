from .core import ElectrodePatch, Mesh, MeshError, facet_measures, simplex_measures
from .generate import (
    BOTTOM,
    HINGED_REGIONS,
    TOP,
    ElectrodeSpec,
    FingerChamberParams,
    HingedActuatorParams,
    attach_electrodes,
    generate_box_mesh,
    generate_finger_chamber_mesh,
    generate_hinged_actuator_mesh,
    mirror_map,
)
from .io import MeshFormatError, load_mesh, save_mesh
from .refine import bisect_elements, refine_near_electrodes, refine_uniform

__all__ = [
    "BOTTOM",
    "HINGED_REGIONS",
    "TOP",
    "ElectrodePatch",
    "ElectrodeSpec",
    "FingerChamberParams",
    "HingedActuatorParams",
    "Mesh",
    "MeshError",
    "MeshFormatError",
    "attach_electrodes",
    "bisect_elements",
    "facet_measures",
    "generate_box_mesh",
    "generate_finger_chamber_mesh",
    "generate_hinged_actuator_mesh",
    "load_mesh",
    "mirror_map",
    "refine_near_electrodes",
    "refine_uniform",
    "save_mesh",
    "simplex_measures",
]
