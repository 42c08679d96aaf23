"""Uncertainty quantification for traffic state estimation.

Physics-informed adversarial estimators for density/velocity random fields
over a road segment, a stochastic macroscopic traffic simulator for ground
truth, and pure-GAN / extended-Kalman-filter baselines.
"""

__version__ = "0.1.0"
