"""Scene-graph sequence embedding for ego-vehicle collision prediction."""

__version__ = "0.1.0"
