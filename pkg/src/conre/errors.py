"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, NumericsError -> 3.
"""


class ConreError(Exception):
    """Base class for all package errors."""


class ConfigError(ConreError):
    """Invalid or inconsistent run configuration."""


class DataError(ConreError):
    """Malformed corpus records, spans, or task structure."""


class CorpusFormatError(DataError):
    """A corpus record failed validation.

    Carries the offending record id and field so ingestion failures are
    actionable.
    """

    def __init__(self, record_id, field, message):
        self.record_id = record_id
        self.field = field
        super().__init__(f"record {record_id!r}, field {field!r}: {message}")


class NumericsError(ConreError):
    """Non-finite loss or other numeric failure during training."""


class StateError(ConreError):
    """Operation violates model/memory lifecycle (ordering, write-once, resume)."""


class ProvenanceError(StateError):
    """An augmented sample reached a computation reserved for originals."""
