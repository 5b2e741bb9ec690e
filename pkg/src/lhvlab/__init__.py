"""Simulation and verification laboratory for a stochastic local-hidden-variable
account of quantum spin correlations: finite-probability locality analysis,
the A/B ensemble Langevin engine with trajectory exchange, spinor algebra,
the shared-seed EPR harness, and an independent Schrödinger oracle."""

__version__ = "0.1.0"
