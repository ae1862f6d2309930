"""Desk-scale bitemporal change detection on a from-scratch autodiff engine."""

__version__ = "0.1.0"
