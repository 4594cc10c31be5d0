"""Hierarchical-copy dialogue state tracker, trained with a from-scratch
reverse-mode autodiff engine on plain numpy arrays."""

__version__ = "0.1.0"
