class StabnavError(Exception):
    pass


class ParameterError(StabnavError, ValueError):
    pass


class OutOfBoundsError(StabnavError):
    pass


class ModelError(StabnavError):
    pass


class TrainingError(StabnavError):
    pass


class ParseError(StabnavError, ValueError):
    pass


class DegenerateDataError(StabnavError, ValueError):
    pass


class ConfigError(StabnavError, ValueError):
    """Malformed configuration; ``field`` names the offending key."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field
