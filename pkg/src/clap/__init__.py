"""Latent-action world model and constrained actor-critic for offline RL."""

__version__ = "0.1.0"
