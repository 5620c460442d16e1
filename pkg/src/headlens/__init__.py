"""Attention-head importance and head-level interventions on a desk-scale transformer."""

__version__ = "0.1.0"
