"""Federated learning with a data-free generator and bidirectional distillation.

Desk-scale simulation: numpy MLPs, a Gaussian benchmark split into label
shards, and FedAvg / FedRep / local-only baselines next to the ablations.
"""

__version__ = "0.1.0"
