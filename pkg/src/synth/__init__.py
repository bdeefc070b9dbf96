"""Synthetic CT data: phantoms, projections, reconstruction, datasets."""
