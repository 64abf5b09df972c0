"""Hierarchical B-spline spaces and BPX preconditioning."""
