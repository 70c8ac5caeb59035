"""Online test-time adaptation with resilient batch norm and an entropy-driven memory bank."""

__version__ = "0.1.0"
