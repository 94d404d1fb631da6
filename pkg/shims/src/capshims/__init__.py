"""Shim services exposing model roles behind the caption-engine wire protocol."""

__version__ = "0.1.0"
