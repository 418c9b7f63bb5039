"""Exception taxonomy shared by all funcorr modules."""


class FuncorrError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(FuncorrError):
    """Operands do not conform (shape mismatch, wrong rank, wrong channel count)."""


class NumericError(FuncorrError):
    """An operation produced NaN/Inf, or training hit a non-finite loss."""


class ContractError(FuncorrError):
    """A caller violated an API precondition (wrong arity, missing gradient, ...)."""


class ConfigError(FuncorrError):
    """An invalid or inconsistent configuration value."""


class DomainError(FuncorrError):
    """A coordinate or index lies outside its valid domain."""


class VocabularyError(FuncorrError):
    """An unknown task or category name."""


class ValidationError(FuncorrError):
    """An annotation file violates the schema; message names record and field."""


class SamplingError(FuncorrError):
    """The dataset cannot support the requested sampling (e.g. a task with < 2 images)."""


class FormatError(FuncorrError):
    """A binary or JSON artifact has a bad magic, version, or structure."""


class TruncationError(FormatError):
    """A binary artifact is shorter than its header declares."""


class CorruptionError(FormatError):
    """A checkpoint is unreadable or is missing expected parameters."""
