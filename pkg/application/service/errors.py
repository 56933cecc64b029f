"""
Error types for the HeadMask toolkit
Each error carries the process exit code the CLI reports for it
"""

from typing import Optional


class HeadMaskError(Exception):
    """Base class for every error raised by the toolkit"""

    exit_code: int = 1


class UsageError(HeadMaskError, ValueError):
    """Caller passed arguments outside an operation's contract"""

    exit_code = 2


class ConfigurationError(UsageError):
    """Configuration is inconsistent (bad keys, gate counts, head counts)"""


class DataError(HeadMaskError):
    """Input data cannot be used (missing files, vocab mismatch)"""

    exit_code = 3


class InputError(DataError):
    """Token ids or sequence lengths outside what the model accepts"""


class ParseError(DataError):
    """A corpus or config file line could not be parsed"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class NumericError(HeadMaskError, ArithmeticError):
    """Training produced a non-finite value"""

    exit_code = 4

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"step {step}: {message}"
        super().__init__(message)
        self.step = step


class DimensionError(HeadMaskError, ValueError):
    """Tensor shapes do not agree for an operation"""


class ContractError(HeadMaskError, RuntimeError):
    """An internal contract was violated (tape reuse, non-scalar loss)"""
