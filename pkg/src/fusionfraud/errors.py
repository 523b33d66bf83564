"""Exception hierarchy shared by all fusionfraud modules.

The CLI maps these onto exit codes: validation/usage errors exit 1,
runtime/numeric errors exit 2, OS-level I/O failures exit 3.
"""


class FusionFraudError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(FusionFraudError):
    """Shapes of the operands are incompatible."""


class ParameterError(FusionFraudError):
    """A configuration value is outside its legal range."""


class ConfigurationError(FusionFraudError):
    """Model parameters and requested variant/trace do not match."""


class NumericError(FusionFraudError):
    """A non-finite value appeared where finite arithmetic is required."""


class FormatError(FusionFraudError):
    """A serialized file is malformed; the message names the offending field."""


class UnsupportedVersionError(FormatError):
    """A serialized file declares a version this build does not read."""


class SplitError(FusionFraudError):
    """A cross-validation split cannot satisfy its stratification contract."""


class GenerationError(FusionFraudError):
    """The synthetic generator could not fill its label quota."""


class InputError(FusionFraudError):
    """An evaluation input is empty or otherwise unusable."""
