class FruitformError(Exception):
    """Base class for all library errors."""


class ValidationError(FruitformError, ValueError):
    """Input or configuration violates a documented contract."""


class TrainingError(FruitformError, RuntimeError):
    pass
