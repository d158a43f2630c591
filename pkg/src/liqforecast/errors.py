"""Exception types shared across the package."""


class InputError(ValueError):
    """Malformed or invalid input data (files, configs, arguments)."""

    def __init__(self, message, *, source=None, line=None):
        self.source = source
        self.line = line
        prefix = ""
        if source is not None:
            prefix += f"{source}: "
        if line is not None:
            prefix += f"line {line}: "
        super().__init__(prefix + message)


class NumericalError(RuntimeError):
    """A numerical procedure failed (singular system, non-finite result)."""
