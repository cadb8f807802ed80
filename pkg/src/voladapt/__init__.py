"""Volumetric domain-adaptation toolkit.

Low-frequency spectral amplitude transfer between volumes, proposal-gated
pseudo-label refinement and selection, evaluation metrics, and a child-process
protocol for plugging in external mask proposers.
"""

__version__ = "0.1.0"
