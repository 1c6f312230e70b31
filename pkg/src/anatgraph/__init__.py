"""Anatomy-conditioned contrastive graph encoders for volumetric images."""

__version__ = "0.1.0"
