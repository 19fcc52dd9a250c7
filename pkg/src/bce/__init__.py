"""Bias constrained estimation: synthetic data, closed-form linear solvers,
a small numpy network trainer and a Monte-Carlo evaluation harness."""

__version__ = "0.1.0"
