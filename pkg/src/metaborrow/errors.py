"""Exception hierarchy with CLI exit codes.

Every failure surfaced by the library maps onto one of three classes so
that the command line can translate it into a stable exit status:
configuration problems (2), malformed or inconsistent input data (3),
and numerical failures such as singular designs or non-convergence (4).
"""


class MetaborrowError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(MetaborrowError):
    """Invalid configuration: missing paths, bad flag combinations."""

    exit_code = 2


class DataError(MetaborrowError):
    """Malformed input data: schema violations, duplicate arms, bad values."""

    exit_code = 3


class NumericalError(MetaborrowError):
    """Numerical failure: singular design, non-convergence, unestimable arm."""

    exit_code = 4
