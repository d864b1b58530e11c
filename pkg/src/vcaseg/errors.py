"""Exception hierarchy for vcaseg."""


class VcaError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(VcaError, ValueError):
    """Tensor shapes disagree.

    ``axis`` names the offending dimension (``"channels"``, ``"height"`` ...)
    when a single one can be blamed.
    """

    def __init__(self, message, axis=None):
        super().__init__(message)
        self.axis = axis


class ConfigError(VcaError, ValueError):
    """A configuration object violates its invariants."""


class GraphError(VcaError, RuntimeError):
    """Backward requested without a matching forward, or similar misuse."""


class MissingGradientError(VcaError, RuntimeError):
    def __init__(self, name):
        super().__init__(f"parameter {name!r} has no gradient; run backward first")
        self.name = name


class FormatError(VcaError):
    """A binary file (checkpoint or packed dataset) is malformed."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ConfigMismatchError(FormatError):
    def __init__(self, field, expected, found):
        super().__init__(
            f"config mismatch on field {field!r}: expected {expected!r}, file has {found!r}"
        )
        self.field = field


class DataError(VcaError):
    """Problems with input data (NIfTI files, packed datasets, masks)."""


class NiftiError(DataError):
    pass


class UnsupportedDatatypeError(NiftiError):
    pass


class NumericAbort(VcaError, FloatingPointError):
    """Training hit a non-finite loss; ``diagnostic`` holds the dump text."""

    def __init__(self, message, diagnostic=""):
        super().__init__(message)
        self.diagnostic = diagnostic
