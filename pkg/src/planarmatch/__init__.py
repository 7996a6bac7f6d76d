"""Piecewise-planar homography hypothesis matching on synthetic two-view scenes."""

__version__ = "0.1.0"
