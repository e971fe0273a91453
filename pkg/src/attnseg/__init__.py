"""Attention-augmented multi-stage adversarial segmentation."""

__version__ = "0.1.0"
