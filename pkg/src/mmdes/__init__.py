"""Multimodal dynamic ensemble selection for arousal/valence regression."""

__version__ = "0.1.0"
