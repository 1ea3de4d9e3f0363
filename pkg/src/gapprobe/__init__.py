"""Black-box prefix probes, early exit and the statistics around them."""

__version__ = "0.1.0"
