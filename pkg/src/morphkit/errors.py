"""Exception hierarchy shared by all morphkit modules."""


class MorphkitError(Exception):
    """Base class for every error raised by morphkit."""


class InvalidVolume(MorphkitError, ValueError):
    pass


class OpenShell(MorphkitError, ValueError):
    pass


class InvalidParameter(MorphkitError, ValueError):
    pass


class FormatError(MorphkitError, ValueError):
    pass


class DimensionMismatch(MorphkitError, ValueError):
    pass


class NumericalError(MorphkitError, ArithmeticError):
    pass


class NoDescent(MorphkitError, RuntimeError):
    pass


class SchemaError(MorphkitError, ValueError):
    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"missing column: {column}")


class EmptyTable(MorphkitError, ValueError):
    pass


class DegenerateBaseline(MorphkitError, ZeroDivisionError):
    pass


class DesignError(MorphkitError, ValueError):
    pass


class NotNested(MorphkitError, ValueError):
    pass


class LengthMismatch(MorphkitError, ValueError):
    pass


class DegenerateSample(MorphkitError, ValueError):
    pass


class DegenerateColumn(MorphkitError, ValueError):
    pass


class DegenerateLabels(MorphkitError, ValueError):
    pass


class MissingData(MorphkitError, ValueError):
    pass


class SeparationWarning(UserWarning):
    """Emitted when a logistic fit diverges toward perfect separation."""
