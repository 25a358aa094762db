"""Quantization-aware coresets and gradient-free calibration for streaming classifiers."""

__version__ = "0.1.0"
