"""Leader-election based planning, scheduling and execution for small rover teams."""

__version__ = "0.1.0"
