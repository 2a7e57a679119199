"""Ensemble statistics and iterative convergence workflows, shipped as a plugin."""
