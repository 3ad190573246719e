"""ipdloc: direct-path IPD estimation and template-matching localization.

A numpy-based lab for multi-speaker sound source localization: STFT
front end with magnitude-free normalization, direct-path inter-channel
phase-difference targets, a full-band/narrow-band recurrent estimator
trained with permutation-invariant regression, and candidate-grid
template matching with detection metrics.
"""

__version__ = "0.1.0"

from .geometry import ArrayGeometry, CandidateGrid, Direction, make_grid, pair_tdoa

__all__ = [
    "ArrayGeometry",
    "CandidateGrid",
    "Direction",
    "make_grid",
    "pair_tdoa",
]
