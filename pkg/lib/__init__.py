"""Desk-scale grounded situation recognition: verb-conditioned role decoding and coarse-to-fine verb re-ranking"""

__version__ = "1.0.0"
