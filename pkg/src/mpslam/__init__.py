"""Particle-based sum-product SLAM over multipath returns from dispersive surfaces."""

from mpslam._kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
