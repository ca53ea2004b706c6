"""Exception hierarchy shared by all qstruct modules."""


class QstructError(Exception):
    """Base class for every error raised by qstruct."""


class SingularMatrix(QstructError, ValueError):
    pass


class NonpositiveMass(QstructError, ValueError):
    pass


class DimensionMismatch(QstructError, ValueError):
    pass


class GridTooSmall(QstructError, ValueError):
    pass


class SupportEscape(QstructError, RuntimeError):
    """Probability mass falls outside the target grid of a refactorization."""


class NotNormalized(QstructError, ValueError):
    pass


class BadDensityMatrix(QstructError, ValueError):
    pass


class StructureMismatch(QstructError, ValueError):
    pass


class BoundaryReached(QstructError, RuntimeError):
    """A wavepacket came within the guard band of the periodic grid edge."""


class OutsideGrid(QstructError, RuntimeError):
    pass


class NodeEncounter(QstructError, RuntimeError):
    """Trajectories stayed below the density floor after regularization."""

    def __init__(self, message, trajectory_ids=()):
        super().__init__(message)
        self.trajectory_ids = tuple(trajectory_ids)


class TooFewSamples(QstructError, ValueError):
    pass


class QuadratureNotConverged(QstructError, RuntimeError):
    pass


class ParseError(QstructError, ValueError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ValidationError(QstructError, ValueError):
    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("invalid config:\n  " + "\n  ".join(self.violations))
