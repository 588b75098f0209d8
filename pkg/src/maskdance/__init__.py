"""Masked token dance generation with genre, music and pose guidance, on a numpy autodiff core."""

__version__ = "0.1.0"
