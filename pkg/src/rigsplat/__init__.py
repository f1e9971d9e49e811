"""Differentiable Gaussian splatting on a mesh rig, CPU only.

Gaussian point fields are bound to the triangles of a deforming proxy
mesh, displaced per frame by a small conditioned MLP, and rendered with
a tile-structured software rasterizer whose gradients are hand-derived
and checked against finite differences.
"""

__version__ = "0.1.0"
