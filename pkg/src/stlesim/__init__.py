"""Spectral Galerkin simulation of transport equations driven by isotropic
divergence-free multiplicative noise on the torus."""

__version__ = "0.1.0"
