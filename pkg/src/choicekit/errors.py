"""Exception hierarchy shared by every module in the package."""


class ChoiceError(Exception):
    """Base class for all errors raised by choicekit."""


# dataset construction and indexing
class IndexOutOfRange(ChoiceError, IndexError):
    pass


class ShapeMismatch(ChoiceError, ValueError):
    pass


class BadPrefix(ChoiceError, ValueError):
    pass


class ChosenItemUnavailable(ChoiceError, ValueError):
    pass


class BadBatchSize(ChoiceError, ValueError):
    pass


class LengthMismatch(ChoiceError, ValueError):
    pass


# long-format ingestion
class IngestError(ChoiceError, ValueError):
    pass


class MultipleChosen(IngestError):
    pass


class NoneChosen(IngestError):
    pass


class InconsistentUserOrSession(IngestError):
    pass


class MissingKeyColumn(IngestError):
    pass


class DuplicateKey(IngestError):
    pass


# formula language
class FormulaSyntaxError(ChoiceError, ValueError):
    """Raised for malformed formula text; ``position`` is the 0-based offset."""

    def __init__(self, message, position):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class UnknownVariation(ChoiceError, ValueError):
    pass


class DuplicateTerm(ChoiceError, ValueError):
    pass


class UnknownObservable(ChoiceError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MissingUserIndex(ChoiceError, ValueError):
    pass


class KeyMismatch(ChoiceError, ValueError):
    pass


# models
class EmptyChoiceSet(ChoiceError, ValueError):
    pass


class BadRegularization(ChoiceError, ValueError):
    pass


class UnknownCoefficient(ChoiceError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else ""


class MissingLevel(ChoiceError, ValueError):
    pass


class ModelConfigError(ChoiceError, ValueError):
    pass


# estimation
class Diverged(ChoiceError, RuntimeError):
    pass


class LineSearchFailed(ChoiceError, RuntimeError):
    pass


class SingularHessian(ChoiceError, ArithmeticError):
    pass


class RegularizedModel(ChoiceError, ValueError):
    pass
