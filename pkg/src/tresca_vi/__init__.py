"""Parabolic variational inequalities with Tresca boundary friction and their optimal control."""

__version__ = "0.1.0"
