"""Recycle learning for 3D hand pose and mesh estimation at desk scale."""
__version__ = "0.1.0"
