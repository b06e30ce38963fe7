"""Weakly supervised detection with a cyclic teacher on synthetic scenes."""
__version__ = "0.1.0"
