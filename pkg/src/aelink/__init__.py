"""End-to-end autoencoder transceivers for SISO and 2x2 MIMO Rayleigh links."""

__version__ = "0.1.0"
