"""Toy interleaved image-text generative model built around a multi-image,
multi-scale deformable feature synchronizer."""

__version__ = "0.1.0"
