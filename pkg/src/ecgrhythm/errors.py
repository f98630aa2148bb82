"""Exception types shared across the pipeline."""


class EcgRhythmError(Exception):
    """Base class for all library errors."""


class FormatError(EcgRhythmError):
    """A file does not conform to its declared on-disk format."""


class SignalParseError(FormatError):
    """A sample line could not be parsed; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        super().__init__(message)
        self.line_no = line_no


class EvidenceError(EcgRhythmError):
    """Not enough (or inconsistent) conduction evidence for an operation."""


class DegenerateDataError(EcgRhythmError):
    """Training data cannot support the requested fit (e.g. one class only)."""
