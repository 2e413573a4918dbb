"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class ShapeError(ContractError):
    pass


class DTypeError(TypeError):
    pass


class ConfigurationError(ValueError):
    pass


class DegenerateError(ValueError):
    pass


class DataError(ValueError):
    pass


class DivergenceError(RuntimeError):
    """Raised when an optimization produces non-finite values and cannot recover."""


class ContainerError(ValueError):
    pass


class VersionError(ContainerError):
    """The file's format version is newer than this reader understands."""


class BadMagicError(VersionError):
    """The file does not start with the container magic.

    An unrecognised format identifier is treated as an unsupported version,
    so callers catching :class:`VersionError` also reject foreign files.
    """


class TruncatedSectionError(ContainerError):
    pass
