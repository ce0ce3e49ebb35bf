"""Randomised model selection and weight noise as defences against
transferable adversarial examples, on a small numpy network engine."""
from . import attacks, data, defenses, metrics, nn

__all__ = ["attacks", "data", "defenses", "metrics", "nn"]
__version__ = "0.1.0"
