"""Inter-slice image-mask generation and label-efficient segmentation toolkit."""

__version__ = "0.1.0"

from .backend import get_backend, set_backend  # noqa: F401
