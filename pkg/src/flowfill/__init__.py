"""Learned sparse-to-dense optical flow interpolation on a small numpy autodiff engine."""

__version__ = "0.1.0"
