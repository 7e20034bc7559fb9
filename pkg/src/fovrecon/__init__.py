"""Perception-aware foveated image reconstruction toolkit.

Pipeline pieces: blue-noise sampling masks and scattered-sample
densification, constrained texture synthesis for near-threshold-distorted
imagery, WGAN-GP training whose critic sees that distorted manifold, and
eccentricity-aware calibrated quality metrics for evaluating the results.
"""

__version__ = "0.1.0"
