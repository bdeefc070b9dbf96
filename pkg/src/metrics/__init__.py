"""Losses, image quality metrics and the evaluation protocol."""
