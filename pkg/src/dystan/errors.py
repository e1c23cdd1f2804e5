"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: configuration/parse/usage problems
exit 2, numerical failures during training exit 3.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigError(ValueError):
    """A configuration value is invalid (bad cutoff, unknown variant, ...)."""


class UsageError(RuntimeError):
    """An API was called in an unsupported way (backward on non-scalar, ...)."""


class InputError(ValueError):
    """Input data violates an operation's precondition."""


class ParseError(ValueError):
    """An input file could not be parsed. Carries the offending line number."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(ValueError):
    """Parsed data violates a structural guarantee (sample counts, ...)."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. a single class)."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch/batch where it happened."""

    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        super().__init__(
            f"non-finite loss {value!r} at epoch {epoch}, batch {batch}"
        )
