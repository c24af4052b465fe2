"""Dispatching and relocation of service engineers on a network of machines."""

__version__ = "0.1.0"
