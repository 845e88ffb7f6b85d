"""Foreground/background concept distillation from a text-conditioned latent denoiser."""

__version__ = "0.1.0"
