from typing import Optional


class TrialError(Exception):
    """Base error with an exit code and a human readable detail.

    Works like an HTTP status + detail pair: the CLI maps ``exit_code``
    straight to the process exit status.
    """

    exit_code = 1

    def __init__(self, detail: str, exit_code: Optional[int] = None):
        super().__init__(detail)
        self.detail = detail
        if exit_code is not None:
            self.exit_code = exit_code

    def to_dict(self) -> dict:
        return {"error": self.detail, "type": type(self).__name__, "exit_code": self.exit_code}


class DataValidationError(TrialError):
    """Malformed input data or configuration."""

    exit_code = 2


class StorageError(TrialError):
    """File could not be read or written."""

    exit_code = 3


class EstimationError(TrialError):
    """Numerical failure: SVD convergence, ill-posed regression, empty donors."""

    exit_code = 4
