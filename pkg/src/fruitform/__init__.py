"""Fruit deformity classification: datasets, silhouettes, CNN classifiers, metrics."""

from fruitform.errors import FruitformError, ValidationError

__version__ = "0.1.0"

__all__ = ["FruitformError", "ValidationError", "__version__"]
