"""Leaf-image CNN training, deconvolutional feature visualization, and
classifier comparison, end to end on the CPU."""

__version__ = "0.1.0"
