"""Centralized active/reactive power management for LV networks with rooftop PV."""

__version__ = "0.1.0"
