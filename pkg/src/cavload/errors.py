"""Exception hierarchy.

Input and configuration problems derive from :class:`InputError` (CLI exit
code 2); everything raised by the physics models derives from
:class:`SimulationError` (exit code 3).
"""


class CavloadError(Exception):
    pass


class InputError(CavloadError):
    pass


class ConfigError(InputError):
    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class SimulationError(CavloadError):
    pass


class OutOfRangeError(SimulationError, ValueError):
    pass


class SingularityError(SimulationError):
    pass


class NoZeroFoundError(SimulationError):
    pass


class DegenerateConfigurationError(SimulationError):
    pass


class SamplingError(SimulationError):
    pass


class NumericalBlowupError(SimulationError):
    def __init__(self, message, atom_id=None):
        super().__init__(message)
        self.atom_id = atom_id


class TimestepTooLargeError(SimulationError):
    pass


class DomainError(SimulationError, ValueError):
    pass


class FitError(SimulationError):
    pass


class InitializationError(FitError):
    pass


class DegenerateDataError(FitError):
    pass


class NonphysicalDataError(SimulationError):
    pass
