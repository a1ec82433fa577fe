"""Prawn length measurement from instance masks and aligned depth frames."""

__version__ = "0.1.0"
