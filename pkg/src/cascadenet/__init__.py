"""Cascaded residual networks trained with TD(lambda) for anytime prediction."""

__version__ = "0.1.0"
