"""Ring-placed delayed-gradient pipeline trainer for small transformer LMs."""

__version__ = "0.1.0"
