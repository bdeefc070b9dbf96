"""Logging, progress, persistence and error helpers."""
