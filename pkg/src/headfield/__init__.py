"""Voxel head phantoms, a quasi-static field solver, and fast per-voxel
surrogates (random forest and a multilinear baseline) for transducer-array
field estimation, evaluated leave-one-out against the solver."""

__version__ = "0.1.0"
