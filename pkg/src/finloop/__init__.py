"""Closed-loop prompt optimization for numeric financial QA over tables
and documents: synthesize progressively harder QA pairs, verify them by
unanimous three-voter consensus, and iteratively diagnose and repair a
task prompt against the accumulated pool."""

__version__ = "0.1.0"
