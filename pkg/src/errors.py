"""
Exception hierarchy for the Koopman lab.
Every message starts with the operation that failed, e.g. "edmd_fit: ...".
"""


class KoopmanLabError(RuntimeError):
    """Base class for numerical and runtime failures (CLI exit code 2)."""


class NumericsError(KoopmanLabError):
    pass


class EnvError(KoopmanLabError):
    pass


class EdmdError(KoopmanLabError):
    pass


class TrainingError(KoopmanLabError):
    pass


class DiagnosticsError(KoopmanLabError):
    pass


class MpcError(KoopmanLabError):
    pass


class FitError(KoopmanLabError):
    pass


class FormatError(KoopmanLabError):
    """Corrupted or incompatible file (dataset, model, results)."""


class UsageError(ValueError):
    """Bad command line or config document (CLI exit code 1)."""
