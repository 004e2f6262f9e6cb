"""Network formation games with incomplete information: simulation, equilibrium and estimation."""

__version__ = "0.1.0"
