"""Attention reallocation and modality-specific experts for audio/visual bias."""

__version__ = "0.1.0"
