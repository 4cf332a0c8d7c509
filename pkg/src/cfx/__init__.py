"""Prototype-based sparse counterfactual explanations for multichannel time series."""

__version__ = "0.1.0"
