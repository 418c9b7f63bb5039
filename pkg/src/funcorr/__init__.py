"""Task-conditioned modular features for functional keypoint correspondence."""

__version__ = "0.1.0"
