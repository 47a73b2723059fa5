"""Desk-scale token-based multimodal protein language modeling toolkit."""

__version__ = "0.1.0"
