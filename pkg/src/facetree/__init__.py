"""Learned spanning-tree topologies over 2-D landmarks.

A weighted complete graph over landmark points is searched for the
spanning tree whose backtracking traversal, fed to a two-stream
(structure + texture) attention-LSTM classifier, minimizes the summed
focal losses. The package provides the graph machinery, the hand-rolled
neural kernels, the swarm search, dataset tooling, and a CLI.
"""

__version__ = "0.1.0"

from . import data, embedding, graph, neural, pipeline, topology  # noqa: F401
