"""Classical open systems under continuous measurement."""

__version__ = "0.1.0"
