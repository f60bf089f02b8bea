"""Exception types raised by the solver."""


class MFGError(Exception):
    """Base class for solver errors."""


class InvalidParameterError(MFGError, ValueError):
    pass


class InvalidControlError(MFGError, ValueError):
    pass


class DegenerateAtomError(MFGError):
    def __init__(self, atom, message=None):
        self.atom = atom
        super().__init__(message or f"atom {atom!r} has no particles")


class IncompatibleFlowError(MFGError, ValueError):
    pass


class NumericalBlowupError(MFGError, FloatingPointError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite state at step {step}")


class BasisDegeneracyError(MFGError):
    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"rank-deficient regression at step {step}")


class UnderSampledError(MFGError):
    def __init__(self, step, n_alive, n_basis):
        self.step = step
        super().__init__(f"step {step}: {n_alive} alive paths for {n_basis} basis functions")


class MaximizationError(MFGError):
    pass


class UnderResolvedGridError(MFGError):
    pass


class ToleranceBelowNoiseFloorError(MFGError, ValueError):
    def __init__(self, tol, floor):
        self.tol = tol
        self.floor = floor
        super().__init__(
            f"tolerance {tol:.4g} is below the measured Monte Carlo noise floor {floor:.4g}"
        )


class ConfigError(MFGError, ValueError):
    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")
