"""Classifier-as-retriever training with FedAvg and local differential privacy."""

__version__ = "0.1.0"
