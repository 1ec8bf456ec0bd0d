"""Federated sequence-to-sequence symptom-to-disease modeling."""

__version__ = "0.1.0"
