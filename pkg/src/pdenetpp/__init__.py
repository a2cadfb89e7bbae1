"""Hybrid simulation of partially known PDEs.

Trainable constrained finite-difference layers supply the known part of the
dynamics, a neural backbone learns the remainder, and pseudo-spectral
reference solvers generate the training data.
"""

__version__ = "0.1.0"
