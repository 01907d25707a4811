from typing import Any, Optional


class MFBDSDEError(Exception):
    """Base class for every failure raised by the solvers"""

    category = "config"
    exit_code = 2

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message

    def to_dict(self) -> dict:
        return {"error": self.category, "detail": self.message}


class InvalidArgumentError(MFBDSDEError, ValueError):
    """Argument outside its documented domain"""


class ShapeError(MFBDSDEError, ValueError):
    """Array or ensemble shapes do not fit together"""


class ParseError(MFBDSDEError, ValueError):
    """Coefficient expression could not be parsed"""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at offset {offset}")
        self.offset = offset


class UnboundVariableError(MFBDSDEError, KeyError):
    """Expression references a variable with no binding"""

    def __init__(self, name: str):
        super().__init__(f"unbound variable '{name}'")
        self.name = name

    def __str__(self) -> str:
        return self.message


class ContractionConditionError(MFBDSDEError):
    """Lipschitz metadata fails the contraction condition"""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class NumericDomainError(MFBDSDEError, ArithmeticError):
    category = "divergence"
    exit_code = 3


class SingularSystemError(MFBDSDEError):
    category = "divergence"
    exit_code = 3


class DivergenceError(MFBDSDEError):
    """Solver state became non-finite"""

    category = "divergence"
    exit_code = 3

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class IterationLimitError(MFBDSDEError):
    """Fixed-point loop exhausted its iteration budget"""

    category = "iteration-limit"
    exit_code = 4

    def __init__(self, message: str, trace: Any = None):
        super().__init__(message)
        self.trace = trace
