"""Packaged resources for levit-mc."""
