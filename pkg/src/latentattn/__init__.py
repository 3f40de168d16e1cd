"""Compressed-latent attention toolkit: variants, decode, cost model, service."""

__version__ = "0.1.0"
