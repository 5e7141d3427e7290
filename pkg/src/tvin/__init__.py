"""Value iteration networks and their transfer across gridworld domains."""

__version__ = "0.1.0"
