"""Recurrent video object segmentation with a coordinate-augmented mask specifier."""

__version__ = "0.1.0"
