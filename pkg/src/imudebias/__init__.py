"""Learned IMU bias dynamics integrated on SO(3) x R^n."""

from .errors import ImuDebiasError

__all__ = ["ImuDebiasError"]
__version__ = "0.1.0"
