"""fabkit: one-line automation of remote computational research tasks."""

__version__ = "0.1.0"
