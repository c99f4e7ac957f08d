"""Few-shot surrogate modeling and discrete Bayesian optimization with auxiliary trial feedback."""

__version__ = "0.1.0"
