"""Adaptive quadtree finite elements for deformable image registration."""

__version__ = "0.1.0"
