"""Data, metrics and experiment harnesses."""
