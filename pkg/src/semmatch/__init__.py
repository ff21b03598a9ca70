"""Semantic-aware detector-free feature matching and homography estimation."""

__version__ = "0.1.0"
