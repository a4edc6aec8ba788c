"""Self-evolving pseudo-labels for semi-supervised referring segmentation.

Desk-scale study package: a tape-based autodiff engine, a tiny hierarchical
referring segmentor conditioned on an external localization prior, logit-space
prior calibration, an actor-critic agent that adapts pseudo-label thresholds
per sample, and a synthetic blob world to validate the loop end to end.
"""

__version__ = "0.1.0"
