"""Block compressive-sensing reconstruction with ReconNet-style networks."""
__version__ = "0.1.0"
