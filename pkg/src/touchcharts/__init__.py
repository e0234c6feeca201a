"""Tactile and visual 3D shape reconstruction with deformable charts."""
