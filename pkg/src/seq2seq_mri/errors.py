"""Exception hierarchy shared by the library and the CLI."""


class Seq2SeqError(Exception):
    """Base class for all package errors."""

    exit_code = 5


class ConfigError(Seq2SeqError):
    exit_code = 3


class DataError(Seq2SeqError):
    """Unreadable, malformed or inconsistent input data."""

    exit_code = 4


class ShapeError(Seq2SeqError, ValueError):
    exit_code = 4


class CheckpointError(Seq2SeqError):
    exit_code = 4
