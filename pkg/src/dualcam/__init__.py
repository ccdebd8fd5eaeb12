"""Dual-branch (RGB + depth) camera-conditioned video latent diffusion at desk scale."""
from .config import __version__

__all__ = ["__version__"]
