"""Loss-distribution based data selection for simulated federated learning."""

__version__ = "0.1.0"
