"""ADER-DG solver for the 3D viscoelastic wave equations on tetrahedral
meshes, with rate-2 clustered local time stepping and face-local compressed
communication."""

__version__ = "0.1.0"
