"""Physiology-aware self-supervised ECG representation learning on numpy (+ optional numba)."""

from ._accel import backend

__version__ = "0.1.0"

__all__ = ["backend", "__version__"]
