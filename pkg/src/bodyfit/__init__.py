"""bodyfit: unsupervised 3D body surface reconstruction from sparse mocap landmarks."""

from .backend import IMPLEMENTATION as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["KERNEL_BACKEND", "__version__"]
