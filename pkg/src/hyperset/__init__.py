"""Hyperspherical energy transformer built as an executable energy-minimisation system."""

from .tensor import Tensor, Tape, finite_diff, no_grad

__all__ = ["Tensor", "Tape", "finite_diff", "no_grad"]
__version__ = "0.1.0"
