"""Contrast-phase classification of CT slices with a contrast-disentangling GAN."""

from .ct_ingest import PhaseLabel, phase_code
from .errors import CDGANError

__version__ = "0.1.0"

__all__ = ["PhaseLabel", "phase_code", "CDGANError", "__version__"]
