"""Exception types shared across the package.

``GmvcError`` marks user-recoverable problems (bad inputs, bad files,
bad configs); the CLI maps it to exit code 1. Anything else escaping to
the CLI is an internal error (exit code 2).
"""


class GmvcError(Exception):
    """Base class for user-facing errors."""


class InvalidInput(GmvcError):
    """An argument violates a documented precondition."""


class ShapeError(GmvcError):
    """Array shapes are inconsistent with the layer or operation."""


class TooShort(GmvcError):
    """A recording has fewer frames than one chunk."""


class InvalidLabel(GmvcError):
    """A class index is outside the declared class count."""


class InvalidManifest(GmvcError):
    """A manifest file is malformed or references missing data."""


class NonFiniteLoss(GmvcError):
    """A loss term became NaN or infinite; carries the term name."""


class StrategyUnavailable(GmvcError):
    """A conversion strategy needs a component the model does not have."""
