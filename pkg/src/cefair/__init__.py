"""Counterfactual feature-level explanations of item-exposure unfairness."""

__version__ = "0.1.0"
