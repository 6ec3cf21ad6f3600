"""Experiment harness: configuration, persistence, pipelines and the command line."""
