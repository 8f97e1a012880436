"""Robust dataset distillation: cluster-wise CVaR training inside a
matching-based distillation loop, plus robustness evaluation."""

__version__ = "0.1.0"
