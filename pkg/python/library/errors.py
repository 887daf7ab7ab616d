from library.config import EXIT_INPUT, EXIT_CAPABILITY, EXIT_DIVERGENCE


class EpochVoteError(Exception):
    """Base class; `exit_code` is what the CLI returns for it."""
    exit_code = EXIT_INPUT


class InputError(EpochVoteError, ValueError):
    exit_code = EXIT_INPUT


class CapabilityError(EpochVoteError):
    """The operation needs data the input does not carry (soft predictions)."""
    exit_code = EXIT_CAPABILITY


class DivergenceError(EpochVoteError, ArithmeticError):
    exit_code = EXIT_DIVERGENCE


class LogFormatError(InputError):
    pass


class BadMagicError(LogFormatError):
    pass


class UnsupportedVersionError(LogFormatError):
    pass


class ChecksumError(LogFormatError):
    pass


class DimensionMismatchError(LogFormatError):
    pass
