"""Dual-resolution risk-object captioning and localization toolkit."""

__version__ = "0.1.0"
