"""Exception hierarchy shared by every petpipe module.

The CLI maps :class:`ParameterError` to exit code 2 and :class:`FormatError`
(including :class:`CorruptionError`) to exit code 3.
"""


class PetPipeError(Exception):
    """Base class for all petpipe errors."""


class ParameterError(PetPipeError, ValueError):
    """Invalid argument, precondition violation or geometry mismatch."""


class RangeError(ParameterError):
    """A value does not fit the requested on-disk datatype."""


class FormatError(PetPipeError):
    """A file is not in a supported format."""


class CorruptionError(FormatError):
    """A file claims a supported format but its content is damaged."""


class TrainingError(PetPipeError):
    """The classifier cannot be trained on the given data."""


class GenerationError(PetPipeError):
    """Phantom synthesis failed (e.g. no room to place a lesion)."""
