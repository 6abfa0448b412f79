"""2-D Helmholtz fast multipole method with an error laboratory."""

__version__ = "0.1.0"
