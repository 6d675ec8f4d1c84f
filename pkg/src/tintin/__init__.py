"""Training-free palette and edge guidance for denoising diffusion samplers."""

__version__ = "0.1.0"
