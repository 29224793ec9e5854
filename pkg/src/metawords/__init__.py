"""Controllable open-domain response generation with meta-word goal tracking."""

__version__ = "0.1.0"
