"""Beam-codebook-aware channel knowledge maps: simulation, learning, evaluation."""

__version__ = "0.1.0"
