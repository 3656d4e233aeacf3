"""Nonnegative Tucker decomposition accelerated by a low multilinear-rank approximation."""
