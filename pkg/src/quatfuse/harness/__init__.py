"""Experiment harness: configuration, data splits, runs, gradient audit, CLI."""
