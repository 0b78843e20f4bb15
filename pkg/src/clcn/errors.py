"""Exception hierarchy shared across the package."""


class CLCNError(Exception):
    pass


class DimensionError(CLCNError, ValueError):
    """Operand shapes do not conform."""


class ContractError(CLCNError, ValueError):
    """A documented precondition was violated by the caller."""


class DegenerateError(CLCNError, ValueError):
    """Input is numerically degenerate (zero-norm row, rank-0 matrix, ...)."""


class OracleError(CLCNError, RuntimeError):
    """The finite-difference oracle could not be evaluated."""


class FormatError(CLCNError, ValueError):
    """A binary file has the wrong magic number or layout."""


class LengthError(FormatError):
    """A binary file's payload is shorter than its header promises."""


class OptimizerError(CLCNError, FloatingPointError):
    def __init__(self, message: str, episode: int | None = None):
        super().__init__(message if episode is None else f"episode {episode}: {message}")
        self.episode = episode


class TrainingError(CLCNError, RuntimeError):
    pass
