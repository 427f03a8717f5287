"""Model-based deep learning toolkit: classical solvers, unfolded networks and
DNN-aided optimizers on a small reverse-mode differentiation engine."""

__version__ = "0.1.0"
