"""Rotation-invariant point-cloud recognition with local reference frames,
hierarchical descriptors, and graph convolutions."""

from . import data, geom, graph, model, nnet

__version__ = "0.1.0"

__all__ = ["data", "geom", "graph", "model", "nnet", "__version__"]
