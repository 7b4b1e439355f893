"""Post-pruning activation repair for small BatchNorm CNNs."""

__version__ = "0.1.0"
