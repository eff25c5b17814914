"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`ConfbalError`,
so callers (and the command line front end) can separate usage problems from
numerical failures without string matching.
"""


class ConfbalError(Exception):
    """Base class for all package errors."""

    #: process exit code used by the command line front end
    exit_code = 1


class UsageError(ConfbalError):
    exit_code = 2


# -- data ingestion and validation -------------------------------------------

class ParseError(UsageError):
    pass


class SchemaError(UsageError):
    pass


class InvariantError(UsageError):
    pass


class ZeroVariance(ConfbalError):
    pass


class DegenerateSplit(ConfbalError):
    pass


# -- forest / kernel -----------------------------------------------------------

class EmptyChild(ConfbalError):
    pass


class InvalidBandwidth(ConfbalError):
    pass


class DegenerateData(ConfbalError):
    pass


class ForestFormatError(ConfbalError):
    pass


# -- weights / estimators ------------------------------------------------------

class SingularSystem(ConfbalError):
    pass


class DegenerateWeights(ConfbalError):
    pass


class DimensionTooSmall(UsageError):
    pass


class ResampleDegenerate(ConfbalError):
    pass


class ZeroPooledSd(ConfbalError):
    pass


class NotConvergedWarning(UserWarning):
    """An iterative fit stopped at its iteration cap; the last iterate is used."""
