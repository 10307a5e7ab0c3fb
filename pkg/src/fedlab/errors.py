"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class ParseError(ValueError):
    """Malformed data file; carries the offending path/line when known."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = str(path) if path is not None else ""
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class NumericError(RuntimeError):
    """Numerical failure (SVD breakdown, non-finite iterates, ...)."""
