"""Multi-funnel fresh-content recommendation stack and the simulator it runs in."""

__version__ = "0.1.0"
