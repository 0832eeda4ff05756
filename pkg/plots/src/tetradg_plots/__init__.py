"""Post-processing figures for tetradg CSV outputs."""

__version__ = "0.1.0"
