"""Packaged data files for lavid."""
