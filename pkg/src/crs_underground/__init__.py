"""Cooperative rate-splitting downlink simulator and PPO resource allocator."""

__version__ = "0.1.0"
