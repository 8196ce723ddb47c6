"""Hybrid-conditioned 3D medical volume synthesis and counterfactual pattern analysis."""

__version__ = "0.1.0"
