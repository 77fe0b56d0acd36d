"""Cycle-consistent virtual staining between H&E and IHC with edge guidance."""

__version__ = "0.1.0"
