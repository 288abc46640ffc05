"""Invariance-aware kernel embeddings through warped semi-inner-product norms."""

from ._kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND"]
