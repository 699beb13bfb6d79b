"""Design-based inference for quasi-experiments under rejective assignment."""

__version__ = "0.1.0"
