"""Exception base shared by every mtfatt module."""

from typing import Any, Dict, Optional


class MtfattError(Exception):
    """Base class for errors raised by mtfatt.

    Subclasses live next to the code that raises them and set ``error_type`` so that
    command-line reports can carry a stable, machine-readable category.
    """

    error_type = "mtfatt_error"

    def __init__(self, message: str, error_type: Optional[str] = None):
        """Initialize the error.

        Args:
            message: Human readable description
            error_type: Optional override of the class-level error category
        """
        self.message = message
        if error_type is not None:
            self.error_type = error_type
        super().__init__(message)

    def to_dict(self) -> Dict[str, Any]:
        """Convert the error to a dictionary for structured output."""
        return {
            "error_type": self.error_type,
            "message": self.message,
        }
