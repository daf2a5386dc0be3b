"""netoas: online pegboard skills assessment engine."""

__version__ = "0.1.0"
