"""Gradual domain adaptation lab: osmosis training, baselines, theory checks."""

__version__ = "0.1.0"
