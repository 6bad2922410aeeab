"""Iterated offline RL with advantage-conditioned policies, distributional
value functions, and flow-matching action heads, on simulated sparse-reward
tasks."""

__version__ = "0.1.0"
