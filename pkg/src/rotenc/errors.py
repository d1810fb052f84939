"""Exception types shared across the package."""


class RotencError(Exception):
    """Base class for all package errors."""


class InvalidConfig(RotencError):
    pass


class InvalidQuaternion(RotencError):
    pass


class NotCentered(RotencError):
    pass


class TooFewPoints(RotencError):
    pass


class ShapeError(RotencError):
    pass


class NotScalar(RotencError):
    pass


class UnknownElement(RotencError):
    pass


class DegenerateCloud(RotencError):
    pass


class ParseError(RotencError):
    """Malformed dataset record; carries the 1-based line number."""

    def __init__(self, line_number, message):
        super().__init__(f"line {line_number}: {message}")
        self.line_number = line_number


class DuplicateId(RotencError):
    pass


class EmptyMolecule(RotencError):
    pass


class ConstantTarget(RotencError):
    pass


class InvalidSplit(RotencError):
    pass


class StaleGradient(RotencError):
    pass


class Diverged(RotencError):
    """Training loss became non-finite; carries (epoch, batch)."""

    def __init__(self, epoch, batch):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class TaskMismatch(RotencError):
    pass


class NoData(RotencError):
    pass
