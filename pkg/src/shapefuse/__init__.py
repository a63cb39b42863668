"""Consensus body shape from monocular silhouettes by unposing silhouette rays."""

__version__ = "0.1.0"
