"""Source-identification self-supervision for multi-modal MRI segmentation."""

from .core import (
    ConfigurationError,
    DegenerateInputError,
    DomainError,
    MixturePlan,
    MultiModalSlice,
    SamplingError,
    SegmentationSample,
    TaskKind,
    TaskParams,
    TrainingSample,
    validate_mixture_plan,
)

__all__ = [
    "ConfigurationError",
    "DegenerateInputError",
    "DomainError",
    "MixturePlan",
    "MultiModalSlice",
    "SamplingError",
    "SegmentationSample",
    "TaskKind",
    "TaskParams",
    "TrainingSample",
    "validate_mixture_plan",
]

__version__ = "0.1.0"
