"""Weakly-supervised localisation from saliency maps refined by sampled region proposals."""

__version__ = "0.1.0"
