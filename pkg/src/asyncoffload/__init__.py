"""Importance-aware asynchronous offloaded training, simulated at desk scale."""

__version__ = "0.1.0"
