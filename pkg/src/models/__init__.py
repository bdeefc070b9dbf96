"""Selective-scan blocks and the restoration backbone."""
