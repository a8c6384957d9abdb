"""Exception hierarchy shared by every module."""


class KneuronsError(Exception):
    """Base class for all package errors."""


class ShapeError(KneuronsError, ValueError):
    """Tensor or vector dimensions do not line up."""


class ContractError(KneuronsError, RuntimeError):
    """An operation was called outside its preconditions."""


class ConfigError(KneuronsError, ValueError):
    """A configuration object violates its invariants."""


class QueryError(KneuronsError, ValueError):
    """A cloze query is malformed (no mask, several masks, multi-token answer)."""


class RequestError(KneuronsError, ValueError):
    """A surgery request is invalid."""


class DivergenceError(KneuronsError, RuntimeError):
    """Training produced a non-finite loss."""
