"""Desk-scale multi-label video tagging pipeline.

Synthetic benchmark data, video-level feature engineering, from-scratch
mixture-of-experts and recurrent models, GAP evaluation, and multi-model
ensembling, all reproducible from a single seed.
"""

__version__ = "0.1.0"
