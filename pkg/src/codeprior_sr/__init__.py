"""Toy-scale blind super-resolution with a codebook prior, uncertainty-guided training,
top-k code matching and Align-Attention."""

__version__ = "0.1.0"
