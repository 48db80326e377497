"""Boundary-sensitive temporal action proposal generation on feature sequences."""

from bsn.intervals import iop, iou, linear_sample

__version__ = "0.1.0"

__all__ = ["iou", "iop", "linear_sample", "__version__"]
