"""Exception hierarchy shared across the package.

Every error raised for a domain reason derives from :class:`LipAuthError`, so
the command line front end can tell domain failures (exit 1) apart from bugs.
"""


class LipAuthError(Exception):
    """Base class for all domain errors."""


class ShapeError(LipAuthError, ValueError):
    """Tensor extents do not fit the operation."""


class NonFiniteError(LipAuthError, FloatingPointError):
    """A gradient, loss or activation became NaN or infinite."""


class ParseError(LipAuthError, ValueError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class VocabularyError(LipAuthError, ValueError):
    """A word does not belong to its category vocabulary."""


class DegenerateROIError(LipAuthError, ValueError):
    """The landmark rectangle has zero or negative extent."""


class FormatError(LipAuthError, ValueError):
    """A binary or text file does not follow its declared layout."""


class SpecError(LipAuthError, ValueError):
    """An invalid speaker split specification."""


class CapacityError(LipAuthError, ValueError):
    def __init__(self, requested, capacity):
        self.requested = requested
        self.capacity = capacity
        super().__init__(
            f"requested {requested} positive pairs but only {capacity} exist"
        )


class ConstraintError(LipAuthError, ValueError):
    """Batches cannot satisfy the distinct (speaker, phrase) rule."""


class UndefinedMetricError(LipAuthError, ValueError):
    """FAR or FRR has an empty denominator."""


class ConflictError(LipAuthError):
    """A user is already enrolled and overwrite was not requested."""


class NotEnrolledError(LipAuthError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class StaleEnrollmentError(LipAuthError):
    """The enrollment was produced by a different checkpoint."""
