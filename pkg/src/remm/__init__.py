"""Rotation-equivariant multimodal image matching on a small numpy autodiff engine."""

__version__ = "0.1.0"
