"""Lyapunov diagnostics for SGD and ghost-category softmax classifiers."""

__version__ = "0.1.0"
