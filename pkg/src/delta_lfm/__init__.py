"""Δ-LFM: latent flow matching for longitudinal disease progression on synthetic scans."""

__version__ = "0.1.0"
