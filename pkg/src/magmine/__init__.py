"""Weakly supervised anomaly detection over snippet features, with sample mining
for supervised recognition heads."""

__version__ = "0.1.0"
