"""Continual learning laboratory for small radiance fields."""

from nerfcl.kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
