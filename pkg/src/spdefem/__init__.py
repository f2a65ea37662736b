"""Matérn-type Gaussian random fields on finite element meshes via sparse SPDE precisions."""

__version__ = "0.1.0"
