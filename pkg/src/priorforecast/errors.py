"""Exception hierarchy shared across the package.

Every error raised by library code derives from :class:`PriorForecastError`
so CLI entry points can catch one type and exit cleanly.
"""


class PriorForecastError(Exception):
    """Base class for all package-specific errors."""


# --- lane graph -----------------------------------------------------------

class DuplicateId(PriorForecastError):
    """Two graph entities (segments, lights) share an id."""


class DanglingEdge(PriorForecastError):
    """An edge or light references a segment id that does not exist."""


class DegeneratePolyline(PriorForecastError):
    """A centerline has fewer than two points or repeated consecutive points."""


class InvalidSegment(PriorForecastError):
    """A lane segment's polygon or metadata violates its invariants."""


class InvalidLight(PriorForecastError):
    """Traffic light state/bookkeeping is inconsistent with the segments."""


class UnknownSegment(PriorForecastError):
    """A segment id was requested that is not part of the graph."""


class UnknownSeed(UnknownSegment):
    """A reachability seed references a segment id outside the graph."""


class NoRoute(PriorForecastError):
    """No legal lane-graph path connects the SDV segment to its goal."""


# --- raster ---------------------------------------------------------------

class EmptyMask(PriorForecastError):
    """A distance transform was requested for a mask with no true cells."""


class UnknownFieldKind(PriorForecastError):
    """Unsupported distance-transform kind."""


# --- scene generation -----------------------------------------------------

class InvalidSpec(PriorForecastError):
    """A world or dataset specification failed validation."""


class Overcrowded(PriorForecastError):
    """Actor placement failed repeatedly; the world cannot hold the request."""


# --- forecaster / numerics ------------------------------------------------

class ShapeMismatch(PriorForecastError):
    """An array argument has the wrong shape for the operation."""


class NonFiniteParams(PriorForecastError):
    """Model parameters contain NaN or infinity."""


class NonFiniteGradient(PriorForecastError):
    """A computed gradient contains NaN or infinity."""


class NonFiniteLoss(PriorForecastError):
    """A training loss became NaN or infinite."""


class InvalidCovariance(PriorForecastError):
    """Scale/correlation values do not describe a positive-definite covariance."""


class CheckpointError(PriorForecastError):
    """A parameter checkpoint is malformed or version-incompatible."""


# --- rewards / training ---------------------------------------------------

class InvalidReward(PriorForecastError):
    """Reward configuration fails validation."""


class InvalidConfig(PriorForecastError):
    """An experiment configuration file is malformed or inconsistent."""


# --- planner --------------------------------------------------------------

class SampleCountMismatch(PriorForecastError):
    """Forecast sample sets for different actors disagree in sample count."""
