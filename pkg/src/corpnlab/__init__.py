"""Desk-scale lab for cooperating region proposal networks in few-shot detection."""

__version__ = "0.1.0"
