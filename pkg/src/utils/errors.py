class EsmlrError(Exception):
    """Base error; exit_code is what the CLI returns when this escapes a command."""
    exit_code = 2


class ConfigError(EsmlrError):
    """Invalid or inconsistent configuration, parameters or variant/mode combination."""
    exit_code = 1


class DataError(EsmlrError):
    """Unreadable, malformed or inconsistent input data."""
    exit_code = 2


class NumericalError(EsmlrError):
    """Non-finite values or an ill-conditioned solve."""
    exit_code = 3


class SolverError(NumericalError):
    """The sparse MAP solver broke one of its guarantees."""
