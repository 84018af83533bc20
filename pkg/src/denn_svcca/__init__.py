"""Layer generality of Poisson-solving networks, measured with SVCCA."""
__version__ = "0.1.0"
