"""Proof-of-Population blockchain: identity, selection, consensus and a network simulator."""

__version__ = "0.1.0"
