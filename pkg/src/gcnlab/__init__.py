"""Deep GCN lab: exact-gradient GCN variants, over-smoothing metrics and stability bounds."""

__version__ = "0.1.0"
