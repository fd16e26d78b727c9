"""Sparse coding with variance-regularized codes: FISTA inference, LISTA
encoders, linear and one-hidden-layer decoders."""

__version__ = "0.1.0"
