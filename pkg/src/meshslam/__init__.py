"""Decentralized cooperative SLAM coordination engine and simulator."""

__version__ = "0.1.0"
