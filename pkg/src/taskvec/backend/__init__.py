"""Model backends: a closed-form toy and a Hugging Face adapter."""

from .base import (
    Backend,
    BackendError,
    CapacityError,
    GenerationParams,
    GenerationResult,
    HiddenCapture,
    InterventionError,
    InterventionSpec,
    TokenSeq,
    check_interventions,
)
from .toy import ToyBackend, ToyConfig, toy_backend

__all__ = [
    "Backend", "BackendError", "CapacityError", "GenerationParams", "GenerationResult", "HiddenCapture",
    "InterventionError", "InterventionSpec", "TokenSeq", "ToyBackend", "ToyConfig", "check_interventions",
    "toy_backend",
]
