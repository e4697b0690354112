"""EV fleet charge/discharge scheduling with dynamic programming and a learned policy."""

__version__ = "0.1.0"
