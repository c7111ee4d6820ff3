"""Exception hierarchy shared across the package."""


class FeatoodError(Exception):
    """Base class for all package errors."""


class NumericalError(FeatoodError, ValueError):
    pass


class ConvergenceError(NumericalError):
    """An iterative solver hit its iteration cap.

    ``iterations`` is the number of iterations (sweeps, SMO steps, ...)
    performed; ``residual`` the last convergence measure, when available.
    """

    def __init__(self, message: str, iterations: int, residual: float | None = None):
        super().__init__(message)
        self.iterations = iterations
        self.residual = residual


class FormatError(FeatoodError):
    """Malformed on-disk file."""


class BadMagicError(FormatError):
    pass


class RankError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ExtentOverflowError(FormatError):
    pass


class ManifestError(FeatoodError, ValueError):
    pass


class FingerprintMismatchError(FeatoodError):
    def __init__(self, expected: str, actual: str, what: str = "checkpoint"):
        super().__init__(
            f"{what} fingerprint mismatch: expected {expected[:16]}..., got {actual[:16]}..."
        )
        self.expected = expected
        self.actual = actual


class StageError(FeatoodError):
    """Benchmark stage failure; carries the stage name and sample id."""

    def __init__(self, stage: str, sample_id: str | None, cause: BaseException):
        where = f" (sample {sample_id})" if sample_id else ""
        super().__init__(f"stage '{stage}' failed{where}: {cause}")
        self.stage = stage
        self.sample_id = sample_id
