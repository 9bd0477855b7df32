"""Exception and warning types.

Each error class carries the CLI exit code it maps to, so the command line
layer can translate failures without a lookup table.
"""


class SmmError(Exception):
    exit_code = 5
    kind = "error"


class ValidationError(SmmError, ValueError):
    """Input data or configuration violates a documented constraint."""

    exit_code = 2
    kind = "validation"

    def __init__(self, message, field=None, row=None):
        super().__init__(message)
        self.field = field
        self.row = row


class FormatError(ValidationError):
    kind = "format"


class ScheduleError(ValidationError):
    kind = "schedule"


class IncompleteRowError(ValidationError):
    kind = "incomplete"


class WeakInstrumentError(SmmError):
    """Randomization does not move adherence enough to identify a parameter."""

    exit_code = 3
    kind = "weak-instrument"

    def __init__(self, message, parameter=None):
        super().__init__(message)
        self.parameter = parameter


class IdentificationError(WeakInstrumentError):
    kind = "identification"


class ConvergenceError(SmmError):
    exit_code = 4
    kind = "nonconvergence"


class NumericalError(SmmError, ArithmeticError):
    exit_code = 5
    kind = "numerical"


class WeakInstrumentWarning(UserWarning):
    pass


class ImputationWarning(UserWarning):
    pass


class CollinearityWarning(UserWarning):
    pass


class StudyWarning(UserWarning):
    pass
