"""Volt-VAr / volt-PF inverter control on radial distribution feeders."""

__version__ = "0.1.0"
