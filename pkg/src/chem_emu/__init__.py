"""Neural emulation of chemical-kinetics trajectories."""

__version__ = "0.1.0"
