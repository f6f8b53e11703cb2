"""Partitioned, shuffled multi-aggregator federated learning."""
__version__ = "0.1.0"
