"""PatchMix few-shot learning toolkit at desk scale."""
from .core import (ArgumentError, CapacityError, DegenerateInputError, IngestionError,
                   NumericalError, PatchMixError, Rng, SamplingError, StateError)

__version__ = "0.1.0"

__all__ = [
    "ArgumentError", "CapacityError", "DegenerateInputError", "IngestionError",
    "NumericalError", "PatchMixError", "Rng", "SamplingError", "StateError",
]
