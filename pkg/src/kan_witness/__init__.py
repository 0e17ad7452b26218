"""Entanglement witnesses learned by Kolmogorov-Arnold networks on two-qubit Pauli correlations."""

__version__ = "0.1.0"
