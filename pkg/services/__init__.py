"""Numerical services: geometry, meshing, spectra and the studies built on them."""
