"""Bi-level Volt/VAR control: MISOCP device dispatch with autonomous inverter groups."""

__version__ = "0.1.0"
