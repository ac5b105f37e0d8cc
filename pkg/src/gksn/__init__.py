"""Geometric Kolmogorov superposition networks.

Invariant point-cloud features, GKSN layers and baselines, a scalar
reverse-mode tape for forces and gradient checks, synthetic Lennard-Jones and
polymer data, training, and a numerical verification suite.
"""

__version__ = "0.1.0"
