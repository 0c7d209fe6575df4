"""Quaternion-wavelet conditioned latent diffusion super-resolution."""
