"""Sonar target recognition with transferred CNN features and linear SVMs."""

__version__ = "0.1.0"
