"""Persistent-memory recurrent cells, parallel-scan training, and baselines."""

__version__ = "0.1.0"
