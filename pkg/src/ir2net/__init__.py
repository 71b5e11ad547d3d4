"""Binary neural networks with information restriction and recovery."""

__version__ = "0.1.0"
