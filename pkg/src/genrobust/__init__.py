"""Adversarial training with generated data, at desk scale.

Pipeline: synthetic data -> non-robust labeler -> class-conditional
Gaussian generator -> pseudo-labeled sample pools -> mixed-batch robust
training (TRADES / standard AT) -> attack-cascade evaluation, plus
distribution diagnostics (complementarity/coverage, FID, IS) and
config-driven experiment sweeps.
"""

__version__ = "0.1.0"
