"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError (and
subclasses) -> 2, numeric/contract failures -> 3, I/O failures -> 4.
"""


class CmdretError(Exception):
    """Base class for all package errors."""


class ConfigError(CmdretError):
    """Invalid user-supplied configuration (unknown key, bad value, bad dims)."""


class DataError(CmdretError):
    """Invalid input data (missing cls, empty dataset, unpaired items)."""


class FormatError(DataError):
    """Malformed binary feature file or checkpoint.

    ``offset`` is the byte position at which reading failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class BatchSizeError(DataError):
    """Batch too small for the requested operation (e.g. noise needs a donor)."""


class ShapeError(CmdretError):
    """Operand shapes incompatible for the requested operation."""


class ContractError(CmdretError):
    """A caller violated an API precondition (programming error, not user data)."""


class StateError(CmdretError):
    """An object was used in an invalid lifecycle state (e.g. tape reused)."""


class DeterminismError(CmdretError):
    """A function expected to be deterministic returned differing values."""


class DivergenceError(CmdretError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
