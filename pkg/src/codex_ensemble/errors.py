"""Exception classes.

Every error raised by the package derives from :class:`CodexError`; the CLI
prints the class name as the machine-parseable error token.
"""


class CodexError(Exception):
    """Base class for all package errors."""


# parsing
class EmptyValue(CodexError, ValueError):
    pass


class Unparseable(CodexError, ValueError):
    pass


class InvalidDates(CodexError, ValueError):
    pass


# data model
class MalformedCode(CodexError, ValueError):
    pass


class EmptyVocabulary(CodexError):
    pass


class NoRetainedLabels(CodexError):
    pass


class BadRatios(CodexError, ValueError):
    pass


class SpecInvalid(CodexError, ValueError):
    pass


# features / training
class NoNumericValues(CodexError):
    pass


class ShapeMismatch(CodexError, ValueError):
    pass


class EmptyDataset(CodexError):
    pass


class ModalityModelsMissing(CodexError):
    pass


class SystemUntrained(CodexError):
    pass


class AllAbsent(CodexError):
    pass


class BadScope(CodexError, ValueError):
    pass


class MissingConfidence(CodexError):
    pass


class UnknownModality(CodexError, ValueError):
    pass


# metrics
class NoTrueLabels(CodexError, ValueError):
    pass


class DegenerateRecord(CodexError, ValueError):
    pass


class IndexOutOfRange(CodexError, IndexError):
    pass


class EmptySelection(CodexError):
    pass


# pipeline
class MissingArtifact(CodexError):
    pass


class ConfigHashMismatch(CodexError):
    pass


class SchemaViolation(CodexError):
    pass


class WorkDirLocked(CodexError):
    pass
