"""Evacuation origin-destination flows from GPS pings, and a direct-demand model fitted to them."""

__version__ = "0.1.0"
