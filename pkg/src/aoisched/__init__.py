"""Age-of-information scheduling of sensors that observe Markov sources."""
from .model import SourceSpec, StepOutcome, SystemSpec, SystemState, validate

__version__ = "0.1.0"

__all__ = ["SourceSpec", "StepOutcome", "SystemSpec", "SystemState", "validate", "__version__"]
