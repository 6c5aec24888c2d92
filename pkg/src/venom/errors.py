"""Exception taxonomy shared by all venom modules.

The CLI maps these onto exit codes: usage/validation problems exit 1,
I/O and file-format problems exit 2, numeric failures exit 3.
"""


class VenomError(Exception):
    """Base class for all errors raised by this package."""


class ContractViolationError(VenomError, ValueError):
    """A caller broke a documented precondition (bad shape, bad range, bad state)."""


class NumericError(VenomError, ArithmeticError):
    """A computation produced NaN/Inf or otherwise diverged."""


class FormatError(VenomError, ValueError):
    """A binary or text file does not match its declared format.

    ``offset``, when not None, is the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (at byte {offset})")
        self.offset = offset


class DetachedGraphError(VenomError):
    """backward was asked for gradients of an output the tape never produced."""
