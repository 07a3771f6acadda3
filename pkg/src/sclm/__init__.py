"""Semi-causal language modelling at desk scale."""

__version__ = "0.1.0"
