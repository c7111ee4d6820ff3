"""Feature-based out-of-distribution detection for volumetric segmentation."""

__version__ = "0.1.0"
