"""Non-autoregressive sequence transduction with fertility latent variables."""

__version__ = "0.1.0"
