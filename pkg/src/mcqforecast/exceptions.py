"""Exception hierarchy shared by every stage of the pipeline."""


class MCQForecastError(Exception):
    """Base class for all package errors."""


class ShapeError(MCQForecastError, ValueError):
    pass


class ContractError(MCQForecastError, ValueError):
    """A precondition of an operation was violated by the caller."""


class ConfigError(MCQForecastError, ValueError):
    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


class IngestionError(MCQForecastError, ValueError):
    def __init__(self, line, field, reason, path=None):
        self.line = line
        self.field = field
        self.reason = reason
        self.path = path
        where = f"{path}:" if path else ""
        super().__init__(f"{where}line {line}: field '{field}': {reason}")


class ReferentialError(MCQForecastError, ValueError):
    pass


class SplitError(MCQForecastError, ValueError):
    pass


class DependencyError(MCQForecastError, RuntimeError):
    def __init__(self, config_id, reason="required artifact is missing"):
        self.config_id = config_id
        super().__init__(f"{config_id}: {reason}")


class CompatibilityError(MCQForecastError, ValueError):
    pass


class CheckpointError(MCQForecastError, ValueError):
    pass
