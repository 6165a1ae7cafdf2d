"""Desk-scale federated breast-density challenge on synthetic data."""
__version__ = "0.1.0"
