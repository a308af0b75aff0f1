"""Scheduling compiler and simulator for multi-pod systolic-array accelerators."""

__version__ = "0.1.0"
