"""Sampling techniques for training detectors on sparsely annotated data."""

__version__ = "0.1.0"
