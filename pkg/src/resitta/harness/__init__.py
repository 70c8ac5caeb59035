"""Experiment harness: configuration, runs, sweeps, oracle verification and CLI."""
