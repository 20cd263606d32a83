"""Early-training spurious-feature dynamics and group-robust training via importance sampling."""

__version__ = "0.1.0"
