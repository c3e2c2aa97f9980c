"""Power-diagram radiance fields: geometry, rendering by ray traversal or
tile rasterization, and gradient-based fitting."""

from .geometry import (AdjacencyGraph, PowerSite, RadicalPlane, Ray, RayInterval, alpha_complex,
                       cech_complex, cell_interval, locate_cell, power_distance, power_dual, radical_plane)
from .render_core import Camera, Image, integrate_segments, read_ppm, write_ppm
from .scene import Cell, Scene, validate_scene
from .rasterizer import cull_to_tiles, rasterize, sort_key
from .raytracer import TraversalStats, insert_steiner, trace_image, trace_ray

__all__ = [
    "AdjacencyGraph", "PowerSite", "RadicalPlane", "Ray", "RayInterval", "alpha_complex", "cech_complex",
    "cell_interval", "locate_cell", "power_distance", "power_dual", "radical_plane",
    "Camera", "Image", "integrate_segments", "read_ppm", "write_ppm",
    "Cell", "Scene", "validate_scene",
    "cull_to_tiles", "rasterize", "sort_key",
    "TraversalStats", "insert_steiner", "trace_image", "trace_ray",
]
