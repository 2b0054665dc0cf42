"""Singer identification across albums with domain-adapted CRNNs."""

__version__ = "0.1.0"
