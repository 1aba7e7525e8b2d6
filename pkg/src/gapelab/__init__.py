"""Desk-scale laboratory for gated adaptive positional encoding.

The package provides three mathematically equivalent forms of a learned
attention mask driven by per-token gates, numerical verifiers for the
closed-form bounds that govern it, and a small trainable decoder for
synthetic long-range retrieval experiments.
"""

__version__ = "0.1.0"
