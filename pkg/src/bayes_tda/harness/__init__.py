"""Datasets, experiment configuration, orchestration and report output."""
