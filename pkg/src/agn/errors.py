"""Exception hierarchy shared by every part of the package."""


class AGNError(Exception):
    """Base class for all package errors."""


class ShapeError(AGNError, ValueError):
    pass


class ConfigError(AGNError, ValueError):
    pass


class InputError(AGNError, ValueError):
    pass


class ContractError(AGNError, RuntimeError):
    pass


class ParseError(AGNError, ValueError):
    pass


class CorruptCheckpointError(AGNError, ValueError):
    """Raised when a checkpoint fails validation; ``field`` names the failing part."""

    def __init__(self, field: str, detail: str = ""):
        self.field = field
        msg = f"corrupt checkpoint: bad {field}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
