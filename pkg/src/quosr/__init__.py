"""Query-based online symbolic regression."""
__version__ = "0.1.0"
