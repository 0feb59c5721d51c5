"""
Exception types raised by the lab modules.

Each error carries the CLI exit code it maps to:
2 config validation, 3 numerical failure, 4 I/O failure.
"""

from typing import Optional


class LabError(Exception):
    """Base class for all lab failures"""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message
        self.step_index: Optional[int] = None

    def at_step(self, step_index: int) -> "LabError":
        """Attach the index of the step that failed and return self"""
        self.step_index = step_index
        return self

    def __str__(self) -> str:
        if self.step_index is not None:
            return f"{self.message} (step {self.step_index})"
        return self.message


class ConfigValidationError(LabError):
    exit_code = 2


class SystemFileError(ConfigValidationError):
    """Malformed system definition file"""

    def __init__(self, message: str, key_path: str = "", line: Optional[int] = None):
        location = key_path or "<root>"
        if line is not None:
            location = f"{location} (line {line})"
        super().__init__(f"{location}: {message}")
        self.key_path = key_path
        self.line = line


class UnknownSystemError(ConfigValidationError):
    def __init__(self, name: str, known):
        super().__init__(f"Unknown system '{name}'. Available: {', '.join(sorted(known))}")
        self.name = name


class NumericalError(LabError):
    exit_code = 3


class NonFiniteStateError(NumericalError):
    """State diverged; reduce the time step"""

    def __init__(self, t: float, magnitude: float, what: str = "state"):
        super().__init__(f"Non-finite {what} at t={t:.6g} (max |x| = {magnitude:.3g}); reduce the time step")
        self.t = t
        self.magnitude = magnitude


class CflViolationError(NumericalError):
    def __init__(self, dt: float, dt_max: float, what: str = "CFL"):
        super().__init__(f"{what} bound violated: dt={dt:.3g} exceeds dt_max={dt_max:.3g}")
        self.dt = dt
        self.dt_max = dt_max


class NegativeDensityError(NumericalError):
    def __init__(self, dt: float, dt_max: float):
        super().__init__(f"Reweighting step would produce negative density: dt={dt:.3g}, dt_max={dt_max:.3g}")
        self.dt = dt
        self.dt_max = dt_max


class InsufficientPathError(ConfigValidationError):
    pass


class OutOfRangeError(ConfigValidationError):
    def __init__(self, t: float, t_min: float, t_max: float):
        super().__init__(f"t={t:.6g} outside observation window [{t_min:.6g}, {t_max:.6g}]")
        self.t = t


class ObsExhaustedError(ConfigValidationError):
    pass


class BinMismatchError(ConfigValidationError):
    pass


class PipelineStageError(LabError):
    """Failure inside one stage of a multi-stage experiment"""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        if isinstance(cause, LabError):
            self.exit_code = cause.exit_code
        elif isinstance(cause, (ValueError, TypeError)):
            self.exit_code = ConfigValidationError.exit_code
        else:
            self.exit_code = NumericalError.exit_code
        self.step_index = getattr(cause, "step_index", None)


class OutputError(LabError):
    exit_code = 4
