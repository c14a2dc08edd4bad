"""Differentiable product quantization with a learned decoder, and scene map compression."""
__version__ = "0.1.0"
