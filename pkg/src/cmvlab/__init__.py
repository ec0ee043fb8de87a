"""Simulation and verification lab for conditional McKean-Vlasov SDEs with common noise."""

__version__ = "0.1.0"
