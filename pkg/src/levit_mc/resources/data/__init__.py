"""Data package for levit-mc reference tables."""
