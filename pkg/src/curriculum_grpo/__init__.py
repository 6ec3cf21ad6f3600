"""Curriculum GRPO with verifiable rewards and rejection-sampled self-improvement."""

__version__ = "0.1.0"
