"""Hierarchical evidence-accumulation modeling: LBA and full DDM likelihoods,
particle MCMC and variational Bayes, with simulation and diagnostics."""

__version__ = "0.1.0"
