"""Distributed adaptive-neighborhood, adaptive-horizon MPC for V-formation."""

__version__ = "0.1.0"
