"""
Error types raised by the benchmark engine
"""

from typing import Optional


class BenchmarkError(Exception):
    """Base class for all engine errors"""

    exit_code = 1


class InputValidationError(BenchmarkError):
    """Bad user input: malformed tables, files, flags or configuration"""

    exit_code = 2


class TableParseError(InputValidationError):
    """A delimited-text row or header failed validation

    Args:
        message: What went wrong
        line: 1-based line number in the source text (header is line 1)
        column: Column name the problem was found in
        source: File name or label of the table
    """

    def __init__(self, message: str, line: Optional[int] = None,
                 column: Optional[str] = None, source: Optional[str] = None):
        self.message = message
        self.line = line
        self.column = column
        self.source = source
        super().__init__(self._format())

    def _format(self) -> str:
        location = self.source or "<input>"
        if self.line is not None:
            location = f"{location}:{self.line}"
        if self.column:
            return f"{location}: column '{self.column}': {self.message}"
        return f"{location}: {self.message}"

    def with_source(self, source: str) -> 'TableParseError':
        """Return a copy of this error attributed to a named source"""
        return TableParseError(self.message, self.line, self.column, source)


class NiftiFormatError(InputValidationError):
    """NIfTI-1 stream could not be parsed or written"""


class CriterionMismatchError(InputValidationError):
    """Hit criterion incompatible with the annotation geometry"""


class UndefinedMetricError(InputValidationError):
    """Metric undefined for the given input (e.g. AUC on a single class)"""


class CurationError(InputValidationError):
    """Curation could not produce the requested output"""


class InvariantViolation(BenchmarkError):
    """Internal consistency check failed"""

    exit_code = 3


__all__ = [
    'BenchmarkError',
    'InputValidationError',
    'TableParseError',
    'NiftiFormatError',
    'CriterionMismatchError',
    'UndefinedMetricError',
    'CurationError',
    'InvariantViolation'
]
