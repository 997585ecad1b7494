"""Exception types shared across the pipeline.

Plain ``ValueError`` is used for bad arguments to library functions; the
classes here cover configuration, file-format, and numeric failures that
the CLI maps to exit code 1.
"""


class PipelineError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(PipelineError):
    """Invalid configuration value or combination."""


class ParseError(PipelineError):
    """A data file could not be parsed."""

    def __init__(self, message, *, path=None, byte_offset=None, record_index=None):
        detail = message
        if path is not None:
            detail += f" [file {path}]"
        if record_index is not None:
            detail += f" [record {record_index}]"
        if byte_offset is not None:
            detail += f" [byte offset {byte_offset}]"
        super().__init__(detail)
        self.path = path
        self.byte_offset = byte_offset
        self.record_index = record_index


class SchemaError(PipelineError):
    """Structurally readable input that violates a format invariant."""


class NumericError(PipelineError):
    """Non-finite value encountered where finite arithmetic is required."""
