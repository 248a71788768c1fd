"""Exception hierarchy shared by all modules.

Each class carries the process exit code the command-line front end uses
when the error escapes a subcommand.
"""


class IonTransportError(Exception):
    exit_code = 3


class ConfigError(IonTransportError):
    exit_code = 2


class ParseError(ConfigError):
    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}"
            if line is not None:
                loc += f":{line}"
            loc += ": "
        super().__init__(loc + message)
        self.path = path
        self.line = line


# numerical failures (exit code 3)
class ConvergenceError(IonTransportError):
    pass


class EquilibriumError(ConvergenceError):
    pass


class QuadratureError(ConvergenceError):
    pass


class FitError(ConvergenceError):
    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class EscapeError(IonTransportError):
    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state


class CollisionError(EscapeError):
    pass


# physically infeasible requests (exit code 4)
class PhysicsError(IonTransportError):
    exit_code = 4


class DomainError(PhysicsError, ValueError):
    pass


class NoWellError(PhysicsError):
    pass


class TopologyError(PhysicsError):
    pass


class SynthError(PhysicsError):
    pass


class BoundError(SynthError):
    def __init__(self, message, electrodes=()):
        super().__init__(message)
        self.electrodes = list(electrodes)


class DurationError(PhysicsError):
    pass


class RangeError(PhysicsError):
    pass


class InstabilityError(PhysicsError):
    def __init__(self, message, mode_vector=None, eigenvalue=None):
        super().__init__(message)
        self.mode_vector = mode_vector
        self.eigenvalue = eigenvalue
