"""Fast atom transport in an optical conveyor belt at the quantum speed limit."""

__version__ = "0.1.0"
