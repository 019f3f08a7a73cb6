"""Exception hierarchy.

Every error raised by the library derives from :class:`ModPretrainError`, so
callers (and the CLI) can map families of failures to exit codes.
"""


class ModPretrainError(Exception):
    pass


# numerics ------------------------------------------------------------------

class ShapeMismatch(ModPretrainError, ValueError):
    pass


class NonFiniteValue(ModPretrainError, FloatingPointError):
    pass


class NonFiniteGradient(NonFiniteValue):
    pass


class NotScalar(ModPretrainError, ValueError):
    pass


class NoTape(ModPretrainError, RuntimeError):
    pass


# inputs --------------------------------------------------------------------

class IdOutOfRange(ModPretrainError, IndexError):
    def __init__(self, value, limit):
        super().__init__(f"id {value} out of range [0, {limit})")
        self.value = value
        self.limit = limit


class SequenceTooLong(ModPretrainError, ValueError):
    def __init__(self, length, limit):
        super().__init__(f"sequence length {length} exceeds max_seq_len {limit}")
        self.length = length
        self.limit = limit


class SequenceTooShort(ModPretrainError, ValueError):
    pass


class IndivisibleImage(ModPretrainError, ValueError):
    def __init__(self, height, width, patch):
        super().__init__(f"image {height}x{width} is not divisible by patch size {patch}")


class MissingPrefixLen(ModPretrainError, ValueError):
    pass


class EmptySequence(ModPretrainError, ValueError):
    pass


class BatchTooSmall(ModPretrainError, ValueError):
    pass


class MissingBatchField(ModPretrainError, KeyError):
    def __init__(self, kind, field):
        super().__init__(f"target/module {kind!r} needs batch field {field!r}")
        self.kind = kind
        self.field = field

    def __str__(self):
        return self.args[0]


# targets -------------------------------------------------------------------

class NoMaskedPositions(ModPretrainError, ValueError):
    pass


class NoValidTargets(ModPretrainError, ValueError):
    pass


class DirectionUnavailable(ModPretrainError, ValueError):
    pass


# composition ---------------------------------------------------------------

class ConfigError(ModPretrainError, ValueError):
    pass


class ParseError(ConfigError):
    def __init__(self, message, line=None):
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{message}{where}")
        self.line = line


class UnknownKey(ConfigError):
    def __init__(self, key):
        super().__init__(f"unknown configuration key {key!r}")
        self.key = key


class UnknownModule(ConfigError):
    def __init__(self, name, component=None):
        where = f" in component {component!r}" if component else ""
        super().__init__(f"unknown module {name!r}{where}")
        self.name = name


class ValidationFailed(ConfigError):
    def __init__(self, diagnostics):
        lines = "; ".join(f"{d.rule}: {d.message}" for d in diagnostics)
        super().__init__(f"configuration is not buildable: {lines}")
        self.diagnostics = diagnostics


class IncompatiblePooling(ModPretrainError, ValueError):
    pass


class NoDecoder(ModPretrainError, ValueError):
    pass


# data ----------------------------------------------------------------------

class DataError(ModPretrainError):
    pass


class EmptyCorpus(DataError, ValueError):
    pass


class NoMaskablePositions(DataError, ValueError):
    pass


class TooFewDocuments(DataError, ValueError):
    pass


class DataExhausted(DataError, RuntimeError):
    pass


# checkpoints ---------------------------------------------------------------

class CheckpointError(ModPretrainError):
    pass


class CheckpointIOError(CheckpointError, IOError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class FingerprintMismatch(CheckpointError):
    pass


class DuplicateDestination(CheckpointError):
    pass


class UnmatchedRequired(CheckpointError):
    pass
