"""Federated training with record-level differential privacy and additively
homomorphic secure aggregation.

Research code: the cryptography here is a faithful, self-contained
implementation for benchmarking and study, not an audited production library.
"""

__version__ = "0.1.0"
