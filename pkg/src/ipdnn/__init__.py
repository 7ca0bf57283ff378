"""Physics-driven single-layer network solver for 2-D TM inverse scattering."""

__version__ = "0.1.0"
