"""Normalized diversification for generative action models, on a numpy
reverse-mode autodiff core."""

__version__ = "0.1.0"

__all__ = ["cli", "data", "diffcore", "gradcheck", "kernels", "losses", "metrics", "nets", "train"]
