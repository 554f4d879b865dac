"""Open-vocabulary 3D panoptic segmentation over point-like primitives."""

from .errors import (ConfigError, GenerationError, MalformedFileError, MetricGateError, MissingArtifactError,
                     PipelineError, PsplatError, StaleArtifactError)

__version__ = "0.1.0"

__all__ = ["ConfigError", "GenerationError", "MalformedFileError", "MetricGateError", "MissingArtifactError",
           "PipelineError", "PsplatError", "StaleArtifactError", "__version__"]
