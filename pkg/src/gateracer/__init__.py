"""Vectorized quadrotor racing simulator and PPO trainer."""

__version__ = "0.1.0"
