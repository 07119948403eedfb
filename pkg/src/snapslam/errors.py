"""Exception taxonomy.

Every error raised on purpose by this package derives from SnapSlamError so
callers (and the CLI) can tell our failures from genuine bugs.  The CLI maps
subclasses to exit codes: ConfigError -> 2, DataError / EvaluationError -> 3,
NumericError -> 4.
"""


class SnapSlamError(Exception):
    """Base class for all deliberate failures."""


class ConfigError(SnapSlamError):
    """Bad or contradictory configuration (unknown key, out-of-range value)."""


class DataError(SnapSlamError):
    """Dataset ingestion failure: missing files, unparseable lines, bad shapes."""


class EvaluationError(SnapSlamError):
    """Evaluation inputs unusable (empty mesh, trajectory length mismatch)."""


class NumericError(SnapSlamError):
    """Non-finite values or a divergent optimization state."""


class TapeError(SnapSlamError):
    """Misuse of the autodiff tape (backward before forward, shape clash)."""


class SkipStep(SnapSlamError):
    """Internal signal: this optimization step has no usable rays; skip it.

    Raised by loss assembly when e.g. every sampled ray is invalid.  The SLAM
    loop catches it and moves on; it must never escape to the user.
    """
