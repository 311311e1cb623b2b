"""Cold-start active-learning selection for 3D segmentation pools."""

__version__ = "0.1.0"
