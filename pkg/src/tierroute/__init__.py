"""Cost-aware routing and calibrated escalation across a tiered model portfolio."""

__version__ = "0.1.0"
