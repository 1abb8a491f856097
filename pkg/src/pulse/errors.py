"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures
onto its documented codes (1 usage, 2 io, 3 data, 4 training, 5 backend).
"""


class PulseError(Exception):
    exit_code = 3


class InvalidArgument(PulseError, ValueError):
    exit_code = 1


class NumericError(PulseError, ArithmeticError):
    exit_code = 4


class DegenerateVector(InvalidArgument):
    pass


class UnsupportedOp(PulseError, TypeError):
    exit_code = 4


class IoError(PulseError, OSError):
    exit_code = 2


class EmptyDataset(PulseError):
    pass


class SplitError(PulseError):
    pass


class CandidatePoolTooSmall(PulseError):
    pass


class UnknownItem(PulseError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class TrainingDiverged(PulseError):
    exit_code = 4


class BackendUnavailable(PulseError):
    exit_code = 5


class BackendProtocolError(PulseError):
    exit_code = 5


class UnsupportedByBackend(PulseError):
    exit_code = 5


class NoNegativesAvailable(PulseError):
    pass


class EmptyText(InvalidArgument):
    exit_code = 3


class DegenerateInput(InvalidArgument):
    exit_code = 3


class MissingRationale(PulseError):
    pass


class AblationContaminated(PulseError):
    pass


class ProtocolViolation(PulseError):
    exit_code = 4


class ArtifactMismatch(PulseError):
    """An artifact on disk does not match the fingerprint of the requested stage."""
