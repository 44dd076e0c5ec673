"""Latent chain-of-thought at desk scale: an encoder that compresses each
reasoning stage into a thinking token, and per-stage decoders that turn the
tokens' hidden states back into text."""

__version__ = "0.1.0"
