"""Exception hierarchy. The CLI maps these onto exit codes."""


class ProsecoError(Exception):
    """Base class for all errors raised by this package."""


class ContractError(ProsecoError, ValueError):
    """A precondition on shapes, sizes or parameters was violated."""


class DegenerateError(ContractError):
    """A softmax row or batch has nothing left to normalise over."""


class OracleError(ProsecoError):
    """A verification oracle could not produce a trustworthy answer."""


class FormatError(ProsecoError, IOError):
    """A binary file has the wrong magic, version or is truncated."""


class ConfigError(ContractError):
    """Configuration is invalid or incompatible with stored state."""
