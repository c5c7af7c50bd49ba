"""Exception hierarchy.

Everything raised on purpose derives from :class:`TumorCalError`.  Input and
configuration problems are :class:`ValidationError` (CLI exit code 1);
solver and optimizer breakdowns are :class:`NumericalError` (exit code 2).
"""


class TumorCalError(Exception):
    pass


class ValidationError(TumorCalError, ValueError):
    pass


class NumericalError(TumorCalError, ArithmeticError):
    pass


# grid / file formats
class DimensionMismatch(ValidationError):
    pass


class EmptyMask(ValidationError):
    pass


class DisconnectedMask(ValidationError):
    pass


class NotAPartition(ValidationError):
    pass


class GridMismatch(ValidationError):
    pass


class FormatError(ValidationError):
    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}:"
        super().__init__(f"{where} {message}" if where else message)


# phantom / registration
class GeometryOutOfBounds(ValidationError):
    pass


class DegenerateImage(ValidationError):
    pass


class UnknownLabelValue(ValidationError):
    pass


# prior
class NonpositiveHyper(ValidationError):
    pass


class MissingRegionHyper(ValidationError):
    pass


# forward / inversion
class TrajectoryMismatch(ValidationError):
    pass


class StepSizeError(NumericalError):
    pass


class LinearSolveFailure(NumericalError):
    pass


class SolveFailure(NumericalError):
    pass


class LineSearchFailure(NumericalError):
    pass


class NonFiniteCost(NumericalError):
    pass


class RankDeficiency(NumericalError):
    pass


# metrics / hypersearch
class EmptyBrain(ValidationError):
    pass


class EmptyReference(ValidationError):
    pass


class DegenerateData(ValidationError):
    pass


class NoValidPoints(ValidationError):
    pass
