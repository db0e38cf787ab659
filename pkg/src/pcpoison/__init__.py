"""Availability attacks for 3D point-cloud classification.

Poison generators (error-minimizing, adversarial, distance-regularized and
feature-collision variants), a small differentiable point-set classifier
with exact gradients, perceptibility metrics, a victim-training harness,
and empirical checks of the degeneracy theory behind the methods.
"""

__version__ = "0.1.0"

VERSION_STRING = f"pcpoison-{__version__}"
