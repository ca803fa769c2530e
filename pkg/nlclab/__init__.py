"""nlclab: numerical laboratory for null-Lagrangian spin histories."""

__version__ = "0.1.0"
