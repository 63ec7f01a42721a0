"""Desk-scale latent-video diffusion with component routing and temporal refinement."""

__version__ = "0.1.0"
