"""Multimodal MRI pipeline: DTI scalar maps, affine co-registration, slice
datasets, and a frozen-encoder fusion classifier."""

__version__ = "0.1.0"

from .core import LABELS

__all__ = ["LABELS", "__version__"]
