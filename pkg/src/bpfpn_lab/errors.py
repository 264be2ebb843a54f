"""Exception hierarchy shared by every module of the package."""


class LabError(Exception):
    """Base class for all errors raised by bpfpn_lab."""


class SizeError(LabError, ValueError):
    pass


class ParameterError(LabError, ValueError):
    pass


class ShapeError(LabError, ValueError):
    pass


class FormatError(LabError, ValueError):
    pass


class GraphError(LabError, ValueError):
    pass


class ContractError(LabError, ValueError):
    pass


class StateError(LabError, RuntimeError):
    pass


class GenerationError(LabError, RuntimeError):
    pass


class DivergenceError(LabError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
        self.loss = loss
