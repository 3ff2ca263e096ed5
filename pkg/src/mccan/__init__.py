"""Multi-cycle-consistent adversarial denoising over a chain of noise-level domains."""

__version__ = "0.1.0"
