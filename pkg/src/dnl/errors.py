"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A precondition of an operation was not met (bad shape, bad argument)."""


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf or hit a singularity."""


class TweedieSingularityError(NumericError):
    def __init__(self, n_pixels: int):
        super().__init__(
            f"Gamma Tweedie denominator (alpha - 1) - y*score <= 0 at {n_pixels} pixel(s)"
        )
        self.n_pixels = n_pixels


class PairingAccessError(ContractViolation):
    """Raised when code asks an unpaired manifest for (clean, noisy) pairs."""


class DataError(OSError):
    """File-level data problems. ``code`` is stable and machine-readable."""

    code = "data_error"

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


class MissingFileError(DataError):
    code = "missing_file"


class MalformedHeaderError(DataError):
    code = "malformed_header"


class ExtentMismatchError(DataError):
    code = "extent_mismatch"


class ManifestError(DataError):
    code = "malformed_manifest"


class ModelMismatchError(ContractViolation):
    """Requested method or noise model disagrees with the trained model."""
