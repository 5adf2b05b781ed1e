"""Contour detection from per-pixel convolutional features and a linear SVM,
with a boundary benchmark (ODS/OIS/AP) to score the results."""

__version__ = "0.1.0"
