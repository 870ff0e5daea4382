"""Two-settlement electricity market equilibria with virtual trading."""

__version__ = "0.1.0"
