"""Residual dense refinement."""
