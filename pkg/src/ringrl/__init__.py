"""Traffic signal control on a dual-ring controller with PPO."""

__version__ = "0.1.0"
