"""Synthetic scenes, stage-formatted tasks and the toy softmax policy."""
