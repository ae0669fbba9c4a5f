"""Segmentation from partially and sparsely labeled multi-source data.

Ambiguity-aware losses, hierarchical sampling, a tiny numpy network and
the tooling around them.
"""

__version__ = "0.1.0"
