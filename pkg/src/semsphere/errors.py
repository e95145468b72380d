"""Exception hierarchy shared across the package."""


class SemsphereError(Exception):
    """Base class for every error raised by this package."""


class InputError(SemsphereError):
    """Bad input data or configuration (CLI exit code 2)."""


class NumericError(SemsphereError):
    """Numerical failure such as a diverging optimisation (CLI exit code 3)."""


# scene-core
class BadMagic(InputError):
    pass


class Truncated(InputError):
    pass


class NonFinite(InputError):
    pass


class IoFailure(InputError):
    pass


class InvalidSpec(InputError):
    pass


# sphere-project
class InsufficientNeighbors(InputError):
    pass


# harmonics
class BandwidthTooHigh(InputError):
    pass


class ResolutionTooLow(InputError):
    pass


class BandwidthMismatch(InputError):
    pass


class InvalidExactShift(InputError):
    pass


# embed
class InvalidConfig(InputError):
    pass


class ShapeMismatch(InputError):
    pass


# metric-train
class NoPositives(InputError):
    pass


class NoNegatives(InputError):
    pass


class EmptySet(InputError):
    pass


class Diverged(NumericError):
    """Loss or parameters became non-finite; ``last_good`` is the newest checkpoint."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


# retrieval-eval
class DuplicateId(InputError):
    pass


class EmptyIndex(InputError):
    pass


class EmptyQueries(InputError):
    pass


class EmptyInput(InputError):
    pass


class DimMismatch(InputError):
    pass


class BadWindow(InputError):
    pass


class MatrixTooSmall(InputError):
    pass
