"""Gradient-guided distillation for balanced multimodal training."""

__version__ = "0.1.0"
