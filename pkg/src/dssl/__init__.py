"""Distributed stable strategy learning (DSSL) over restless Markov channels."""

from .markov import MarkovChannel, SystemBounds, compute_bounds, quantize_fading
from .matching import Matching, RateMatrix, optimal_assignment, stable_matching

__all__ = [
    "MarkovChannel",
    "SystemBounds",
    "compute_bounds",
    "quantize_fading",
    "Matching",
    "RateMatrix",
    "optimal_assignment",
    "stable_matching",
]
__version__ = "0.1.0"
