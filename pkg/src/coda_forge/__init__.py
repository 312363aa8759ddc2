"""Counterfactual data augmentation for factored MDPs."""
__version__ = "0.1.0"
