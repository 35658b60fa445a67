"""Discrete-diffusion text-motion toolkit: RVQ tokenizer, masked denoiser,
confidence-guided decoding, reward fine-tuning, and evaluation metrics."""

__version__ = "0.1.0"
