"""Image-text matching from the cross-attention maps of a small latent diffusion model."""

__version__ = "0.1.0"
