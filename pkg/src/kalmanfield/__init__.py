"""Deformable radiance fields with a Kalman-style fused deformation estimate."""

__version__ = "0.1.0"
