"""Framework-free two-hand mesh regression: spectral GCN, patch attention and cross-hand attention."""
from .config import Config
from .errors import (ConfigError, DisconnectedGraphError, GradCheckAborted, MeshError, MissingGradientError,
                     ShapeError, TrainingDiverged)

__version__ = "0.1.0"

__all__ = ["Config", "ConfigError", "DisconnectedGraphError", "GradCheckAborted", "MeshError",
           "MissingGradientError", "ShapeError", "TrainingDiverged", "__version__"]
