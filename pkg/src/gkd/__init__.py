"""Gesture recognition models with distillation and compression."""

__version__ = "0.1.0"
