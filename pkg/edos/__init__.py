"""Transformer encoders, representation fusion and evaluation for EDOS sexism detection."""

__version__ = "0.1.0"
