"""Dynamic regularization (DReg) for robust confidence calibration.

Subpackages follow the pipeline: ``synthdata`` builds datasets, ``model`` and
``losses`` define the classifier and its objectives, ``trainer`` runs SGD,
``metrics`` scores predictions and ``theory`` checks the Gaussian-mixture
contamination analysis in closed form and by simulation.
"""

from dreg.errors import (
    ConfigError,
    DregError,
    NumericError,
    ParseError,
    TrainingError,
    UndefinedMetricError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DregError",
    "NumericError",
    "ParseError",
    "TrainingError",
    "UndefinedMetricError",
    "__version__",
]
