"""Dense patch-feature export for frozen vision foundation models."""

__version__ = "0.1.0"
