"""Point-supervised segmentation with a transform-consistency loss."""

__version__ = "0.1.0"
