"""Learning time-reversible and reversible-symplectic evolution maps."""

__version__ = "0.1.0"
