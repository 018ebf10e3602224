"""Brand-neuron attribution, norm-preserving intervention and menu auctions on a toy LM."""

__version__ = "0.1.0"
