"""Safe and stable actor-critic control with barrier/Lyapunov constraints."""

__version__ = "0.1.0"
