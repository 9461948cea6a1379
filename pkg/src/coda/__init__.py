"""Desk-scale curriculum self-training for segmentation under adverse scenes."""

__version__ = "0.1.0"
