"""Discriminative and denoising-diffusion learning-to-rank on LETOR / MSLR data."""

__version__ = "0.1.0"
