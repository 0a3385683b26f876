"""Training toolkit for low-precision CNNs with decaying helper branches."""

__version__ = "0.1.0"
