"""Tempo-enriched diffusion policies with sparse-reward RL fine-tuning."""

__version__ = "0.1.0"
