"""Exception hierarchy shared by every stage of the registration pipeline."""


class RegistrationError(Exception):
    """Base class for all errors raised by :mod:`oaareg`."""


class DegenerateInputError(RegistrationError, ValueError):
    """Input is well-formed but numerically degenerate (zero norms, collinear support...)."""


class EstimationError(RegistrationError):
    """A pose estimator could not produce a transform."""


class CloudFormatError(RegistrationError, ValueError):
    """Base class for point cloud file parsing errors."""

    def __init__(self, message, *, line=None, offset=None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.line = line
        self.offset = offset


class PlyHeaderError(CloudFormatError):
    """The PLY header is missing, truncated or uses an unsupported layout."""


class CloudCountError(CloudFormatError):
    """Declared and actual element/property counts disagree."""


class NonFiniteCoordinateError(CloudFormatError):
    """A coordinate parsed as NaN or infinity."""
