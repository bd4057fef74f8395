"""Exception hierarchy shared by the whole package.

The CLI maps these onto exit codes: validation errors exit 1, I/O errors
exit 2, format/corruption errors exit 3.
"""


class WildtagError(Exception):
    """Base class for all package errors."""


class MediaError(WildtagError):
    """Bad request against a simulated device (range, size, geometry)."""


class MediaFailedError(MediaError):
    """Write issued to a device that already lost power."""


class PowerLossError(MediaError):
    """Raised by the write during which the injected power loss fires."""


class LogError(WildtagError):
    """Log layer failure (format violation, corrupt header)."""


class LogFullError(LogError):
    """No room left on the medium for the requested append."""


class WireError(WildtagError):
    """Radio payload that cannot be encoded or decoded."""

    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class DefinitionError(WildtagError):
    """Invalid tag definition text or config block."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        loc = ""
        if line is not None:
            loc = f"line {line}"
            if column is not None:
                loc += f", col {column}"
            loc = f" [{loc}]"
        super().__init__(f"{message}{loc}")
        self.line = line
        self.column = column


class ScenarioError(WildtagError):
    """Invalid simulation scenario."""


class StoreError(WildtagError):
    """Item store corruption or conflicting ingestion."""
