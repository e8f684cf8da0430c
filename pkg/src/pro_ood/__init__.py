"""Perturbation-rectified OOD detection at desk scale."""

__version__ = "0.1.0"
