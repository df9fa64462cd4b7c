"""Prismatic CAD reconstruction from signed-distance voxel models."""

__version__ = "0.1.0"
