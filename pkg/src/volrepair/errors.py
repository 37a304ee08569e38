"""Exception types shared across the package."""


class VolRepairError(Exception):
    """Base class for all errors raised by this package."""


class QuoteParseError(VolRepairError):
    """A quote file row could not be parsed."""

    def __init__(self, line_no, message):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class EmptyInputError(VolRepairError):
    """The quote file contains no usable rows."""


class InsufficientDataError(VolRepairError):
    """Not enough quotes to run the requested fit."""


class DegenerateParityError(VolRepairError):
    """Call-put parity regression produced an unusable discount or forward."""


class InvalidPriceError(VolRepairError):
    """A normalized price is nonpositive or otherwise unusable."""


class PriceOutOfBandError(VolRepairError):
    """A price sits on or outside the static no-arbitrage band.

    Carries the violated bound so callers can report which side failed.
    """

    def __init__(self, price, bound_kind, bound_value, location=None):
        where = f" at {location}" if location is not None else ""
        super().__init__(
            f"price {price!r} violates {bound_kind} bound {bound_value!r}{where}"
        )
        self.price = price
        self.bound_kind = bound_kind
        self.bound_value = bound_value
        self.location = location


class InvalidKmaxError(VolRepairError):
    """The requested grid upper bound does not exceed every quoted strike."""


class DegenerateCalibrationError(VolRepairError):
    """The calibration sub-grid yields no negative difference quotient."""


class DuplicateConstraintError(VolRepairError):
    """The same calibration node was supplied twice."""


class RankError(VolRepairError):
    """A linear system expected to have full row rank does not."""


class SingularSystemError(VolRepairError):
    """A direct linear solve failed on a singular matrix."""


class ProblemTooLargeError(VolRepairError):
    """The exact LP path was asked to handle more variables than its cap."""


class KmaxTooSmallError(VolRepairError):
    """The coupling program is infeasible; the grid upper bound was too small."""


class InstabilityError(VolRepairError):
    """A scaling substep overflowed its safe exponent range.

    Names the substep and suggests a larger regularization parameter.
    """

    def __init__(self, substep, detail=""):
        extra = f" ({detail})" if detail else ""
        super().__init__(
            f"numerical instability in substep {substep}{extra}; "
            "try a larger regularization epsilon"
        )
        self.substep = substep


class DomainViolationError(VolRepairError):
    """A dual variable left the domain of its conjugate term."""


class InvalidCalibrationError(VolRepairError):
    """The calibration sub-grid is itself arbitrageable."""
