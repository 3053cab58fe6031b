"""Multi-qubit Rydberg gates, GHZ-state simulation and GHZ clock metrology."""

__version__ = "0.1.0"
