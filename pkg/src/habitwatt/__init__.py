"""Habit-aware energy monitoring for smart offices and homes."""

__version__ = "0.1.0"
