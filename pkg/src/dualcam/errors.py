class ShapeError(ValueError):
    """Array dimensions do not satisfy an operation's shape contract."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class InputError(ValueError):
    """Rejected input values (non-finite entries, invalid poses, ...)."""


class NumericError(RuntimeError):
    """A loss or latent became non-finite during training or sampling."""


class TrajectoryParseError(ValueError):
    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
