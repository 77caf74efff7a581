"""Exception hierarchy shared by all adapos modules."""


class AdaposError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(AdaposError, ValueError):
    pass


class ConfigurationError(AdaposError, ValueError):
    pass


class ValidationError(AdaposError, ValueError):
    pass


class AntennaIdError(AdaposError, IndexError):
    pass


class UsageError(AdaposError, RuntimeError):
    pass


class NumericError(AdaposError, FloatingPointError):
    pass


class OracleError(AdaposError, RuntimeError):
    """The finite-difference oracle could not produce a trustworthy answer."""


class DegenerateSampleError(AdaposError, ValueError):
    pass


class DegenerateFitError(AdaposError, ValueError):
    pass


class UnreachableError(AdaposError, LookupError):
    """Two graph nodes have no connecting path."""


class ExcludedCaseError(AdaposError, ValueError):
    pass


class DivergenceError(AdaposError, FloatingPointError):
    pass


class ComparabilityError(AdaposError, ValueError):
    pass


class FormatError(AdaposError, ValueError):
    """A file does not follow the expected on-disk layout."""
