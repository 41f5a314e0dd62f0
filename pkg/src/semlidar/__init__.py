"""Semantic single-photon LiDAR recognition with a self-updating knowledge base."""

__version__ = "0.1.0"
