"""Data models for the evolutionary reserving engine."""
