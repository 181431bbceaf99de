"""Exception hierarchy shared by every module."""


class NIWFError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(NIWFError, ValueError):
    """A precondition of an operation was violated."""


class DimensionError(ContractError):
    """Operand shapes are incompatible."""


class InputError(NIWFError, ValueError):
    """Bad user-supplied data, e.g. a token id outside the vocabulary."""


class ConfigError(NIWFError, ValueError):
    """Malformed or unknown configuration key."""


class PersistenceError(NIWFError, OSError):
    """Base class for checkpoint load failures."""


class ChecksumError(PersistenceError):
    pass


class VersionError(PersistenceError):
    pass


class TruncatedError(PersistenceError):
    pass
