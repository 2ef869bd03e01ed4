"""Style-transfer federated learning lab."""

__version__ = "0.1.0"
