"""Script-driven video moment montage: data model, fusion network, training and evaluation."""

__version__ = "0.1.0"
