"""Model-free online primal-dual optimization with a real-time OPF simulator."""

__version__ = "0.1.0"
