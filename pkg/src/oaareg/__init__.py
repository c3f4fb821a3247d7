"""Overlap-aware coarse-to-fine point cloud registration.

Soft one-to-many superpoint matching gated by overlap scores, dustbin Sinkhorn
dense matching inside matched patches, and a feature-similarity seeded pose
estimator, with synthetic scenes and metrics to evaluate them.
"""

from .core import (
    Correspondence,
    CorrespondenceSet,
    PointCloud,
    RigidTransform,
    apply_transform,
    compose,
    invert,
)
from .errors import (
    CloudCountError,
    CloudFormatError,
    DegenerateInputError,
    EstimationError,
    NonFiniteCoordinateError,
    PlyHeaderError,
    RegistrationError,
)
from .pipeline import RunConfig, register_scene, run_benchmark, run_register

__version__ = "0.1.0"

__all__ = [
    "Correspondence",
    "CorrespondenceSet",
    "PointCloud",
    "RigidTransform",
    "apply_transform",
    "compose",
    "invert",
    "CloudCountError",
    "CloudFormatError",
    "DegenerateInputError",
    "EstimationError",
    "NonFiniteCoordinateError",
    "PlyHeaderError",
    "RegistrationError",
    "RunConfig",
    "register_scene",
    "run_benchmark",
    "run_register",
]
