"""Exception types shared across the package."""


class GensplatError(Exception):
    """Base class for all package-specific errors."""


class BehindCameraError(GensplatError):
    """Point or splat has non-positive camera-space depth."""


class NonpositiveDepthError(GensplatError, ValueError):
    """Unprojection requested at depth <= 0."""


class DegenerateBaselineError(GensplatError):
    """Camera centers coincide; epipolar geometry undefined."""


class DegenerateLineError(GensplatError):
    """Epipolar line degenerated to the zero vector."""


class NoPairsError(GensplatError, ValueError):
    """Consistency score requested over an empty set of view pairs."""


class InvalidScaleError(GensplatError, ValueError):
    """Splat scale must be strictly positive on every axis."""


class BadShapeError(GensplatError, ValueError):
    """Array shape incompatible with the requested operation."""


class ShapeMismatchError(BadShapeError):
    """Two arrays that must agree in shape do not."""


class ZeroSigmaError(GensplatError, ValueError):
    """Operation undefined at noise level zero."""


class BadParamsError(GensplatError, ValueError):
    """Invalid numeric parameters (schedule, scene generation, ...)."""


class BadConfigError(GensplatError, ValueError):
    """Model or run configuration failed validation."""


class NoValidPixelsError(GensplatError):
    """No pixel satisfied the validity mask required by the operation."""


class NonFiniteLossError(GensplatError):
    """A loss term or gradient became NaN/Inf; message names the tensor."""


class BadMagicError(GensplatError, ValueError):
    """File does not start with the expected magic bytes."""


class UsageError(GensplatError):
    """Command line was malformed; carries the synopsis to print."""
