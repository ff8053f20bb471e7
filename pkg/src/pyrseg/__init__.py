"""Pyramid segmentation network with OHNEM loss, competitive training and volumetric metrics, on a numpy autodiff core."""

__version__ = "0.1.0"
