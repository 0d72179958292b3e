"""Exception types shared across the package."""


class TCTError(Exception):
    """Base class for all errors raised by tctseg."""


class ShapeError(TCTError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(TCTError, ValueError):
    pass


class DomainError(TCTError, ValueError):
    pass


class ContractError(TCTError, ValueError):
    pass


class FormatError(TCTError):
    """A file does not follow its binary/text format.

    ``offset`` is the byte position at which reading failed, when known.
    """

    def __init__(self, message, offset=None, path=None):
        self.offset = offset
        self.path = path
        parts = [message]
        if offset is not None:
            parts.append(f"at byte offset {offset}")
        if path is not None:
            parts.append(f"in {path}")
        super().__init__(" ".join(parts))


class GenerationError(TCTError):
    pass


class NonFiniteError(TCTError, FloatingPointError):
    pass
