"""Differentiable audio-effect models: gray-box DSP chains and black-box backbones."""

__version__ = "0.1.0"
