"""Simulation toolkit for diabatic transport and separation of trapped ions."""
__version__ = "0.1.0"
