"""Domain-generalized rPPG: explicit STMap augmentations and a disentangling dual-branch model."""

__version__ = "0.1.0"
