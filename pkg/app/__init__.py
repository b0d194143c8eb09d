"""zdsynth: periodic stabilizing-controller synthesis from optimal trajectories."""

__version__ = "0.1.0"
