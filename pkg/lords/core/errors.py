"""
Exception hierarchy for lords.
Every error carries the CLI exit code it maps to.
"""


class LordsError(Exception):
    """Base class for all lords errors"""
    exit_code = 1


class ShapeError(LordsError):
    """Operand shapes do not agree"""
    exit_code = 3


class DivisibilityError(LordsError):
    """Block size does not divide the column count"""
    exit_code = 3


class RankError(LordsError):
    """Rank outside the valid range for the matrix shape"""
    exit_code = 3


class BoundaryProximityError(LordsError):
    """An element sits too close to a rounding boundary for a derivative check"""
    exit_code = 3


class FormatError(LordsError):
    """Malformed tensor or packed artifact file"""
    exit_code = 5


class BadMagicError(FormatError):
    exit_code = 5


class VersionError(FormatError):
    exit_code = 5


class TruncatedFileError(FormatError):
    exit_code = 6


class UnsupportedDtypeError(FormatError):
    exit_code = 7


class CodebookError(LordsError):
    """Unknown codebook id or code index out of range"""
    exit_code = 8


class SvdConvergenceError(LordsError):
    """SVD did not converge"""
    exit_code = 9


class QatDivergenceError(LordsError):
    """QAT loss became non-finite"""
    exit_code = 9


class ConfigError(LordsError):
    """Invalid configuration file or value"""
    exit_code = 10


class UndefinedRatioError(LordsError):
    """Reduction ratio requested against a zero baseline residual"""
    exit_code = 3
