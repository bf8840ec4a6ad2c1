"""Global structure-from-motion engine with a synthetic benchmark harness."""

__version__ = "0.1.0"
