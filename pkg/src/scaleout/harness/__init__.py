"""Experiment driver: baselines, overhead runs, scaling matrix, sensitivity sweep."""
