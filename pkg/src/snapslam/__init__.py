"""Desk-scale RGBD SLAM with quantized neural-field queries.

The package is a plain numpy library: build a `Config`, hand it a dataset and
a `SlamSystem`, or drive everything through the `snapslam` command.  See
README.md for the tour and demos/ for narrative scripts.
"""

__version__ = "0.1.0"

from .config import Config, default_config  # noqa: F401
from .errors import (  # noqa: F401
    ConfigError,
    DataError,
    EvaluationError,
    NumericError,
    SkipStep,
    SnapSlamError,
    TapeError,
)
