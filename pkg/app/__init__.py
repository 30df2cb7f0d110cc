"""Multivariate evolutionary GLM claims reserving engine."""
