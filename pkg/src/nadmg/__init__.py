"""Neural ADMG learning: causal discovery and inference under latent confounding."""
__version__ = "0.1.0"
