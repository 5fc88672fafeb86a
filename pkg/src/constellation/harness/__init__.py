"""Experiment harness: configs, workloads, oracles, runs, and reports."""
