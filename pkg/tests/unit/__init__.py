"""Unit tests for the project."""
